import json

import numpy as np
import pytest

from peelkit import (InvalidStack, RunManifest, StageFailed, UnknownFixture, make_fixture,
                     make_scene, run_roundtrip)
from peelkit import io as pio
from peelkit.fixtures import count_boundary_loops, icosphere
from peelkit.pipeline import (MANIFEST_SCHEMA, REPORT_SCHEMA, RoundtripParams, contact_sheet,
                              load_layered, load_scene, save_layered)

from conftest import recon, stack


# --- fixtures -------------------------------------------------------------------

def test_icosphere_counts():
    for n in range(5):
        m = icosphere(n)
        assert m.n_vertices == 10 * 4 ** n + 2 and m.n_faces == 20 * 4 ** n


def test_sphere_fixture_counts():
    m = make_scene("sphere").meshes[0]
    assert (m.n_vertices, m.n_faces) == (2562, 5120)


def test_cylinder_skirt_two_boundary_loops():
    assert count_boundary_loops(make_scene("cylinder_skirt").meshes[0]) == 2


def test_mannequin_three_labels():
    labels = np.concatenate([m.face_labels for m in make_scene("two_garment_mannequin").meshes])
    assert len(np.unique(labels[labels > 0])) == 3


def test_unknown_fixture(tmp_path):
    with pytest.raises(UnknownFixture):
        make_scene("teapot")
    with pytest.raises(UnknownFixture):
        make_fixture("teapot", tmp_path)


def test_fixture_files_deterministic(tmp_path):
    a = make_fixture("two_garment_mannequin", tmp_path / "a")
    b = make_fixture("two_garment_mannequin", tmp_path / "b")
    for k in a:
        assert open(a[k], "rb").read() == open(b[k], "rb").read()
    sc = load_scene(tmp_path / "a")
    ref = make_scene("two_garment_mannequin")
    assert sc.camera == ref.camera
    assert np.array_equal(sc.meshes[0].face_labels,
                          np.concatenate([m.face_labels for m in ref.meshes]))
    assert RunManifest.load(tmp_path / "a" / "manifest.json").verify() == []


# --- manifests ------------------------------------------------------------------

def test_manifest_record_and_verify(tmp_path):
    f = tmp_path / "x.bin"
    f.write_bytes(b"abc" * 100)
    man = RunManifest(tmp_path)
    man.record("stage", outputs=[f], params={"tau": 0.1})
    path = man.save()
    data = json.loads(path.read_text())
    assert data["schema"] == MANIFEST_SCHEMA and data["stages"][0]["outputs"] == {
        "x.bin": __import__("hashlib").sha256(b"abc" * 100).hexdigest()}
    assert RunManifest.load(path).verify() == []


def test_manifest_missing_path_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        RunManifest(tmp_path).record("s", outputs=[tmp_path / "nope"])


@pytest.mark.parametrize("pos", [0, 17, 299])
def test_verify_detects_single_byte_change(tmp_path, pos):
    f = tmp_path / "x.bin"
    f.write_bytes(bytes(range(256)) + bytes(44))
    man = RunManifest(tmp_path)
    man.record("s", outputs=[f])
    path = man.save()
    raw = bytearray(f.read_bytes())
    raw[pos] ^= 0x01
    f.write_bytes(bytes(raw))
    problems = RunManifest.load(path).verify()
    assert problems == [{"stage": "s", "path": "x.bin", "problem": "hash mismatch"}]
    f.unlink()
    assert RunManifest.load(path).verify()[0]["problem"] == "missing"


def test_layered_mesh_files_roundtrip(tmp_path):
    lm = recon("sphere", 5)
    save_layered(lm, tmp_path / "g.obj")
    back = load_layered(tmp_path / "g.obj")
    assert np.array_equal(back.mesh.vertices, lm.mesh.vertices)
    assert np.array_equal(back.mesh.faces, lm.mesh.faces)
    assert np.array_equal(back.vertex_layer, lm.vertex_layer)


def test_contact_sheet_shape():
    s = stack("sphere")
    img = contact_sheet(s)
    assert img.dtype == np.uint8 and img.ndim == 3 and img.shape[2] == 3
    assert img.shape[0] >= 128 * 4 or img.shape[1] >= 128 * 4


# --- round trip -------------------------------------------------------------------

FAST = dict(atlas_resolution=256, p2s_samples=5000)


def test_roundtrip_sphere_writes_everything(tmp_path):
    rep = run_roundtrip(make_scene("sphere"), RoundtripParams(**FAST), tmp_path, name="sphere")
    assert rep["schema"] == REPORT_SCHEMA and rep["pass"], rep["checks"]
    entry = rep["labels"]["5"]
    assert entry["p2s"] <= entry["p2s_limit"]
    assert entry["charts"]["flipped"] == 0 and entry["charts"]["max_residual"] <= 1e-10
    assert entry["texture"]["match_fraction"] >= 0.95
    for sub in ("render/stack.json", "reconstruct/garment_5.obj", "unwrap/garment_5_atlas.json",
                "bake/garment_5.png", "bake/garment_5.mtl", "report.json",
                "inspect/peel_layers.png", "inspect/uv_5.png", "inspect/qc_5.png"):
        assert (tmp_path / sub).exists(), sub
    man = RunManifest.load(tmp_path / "manifest.json")
    assert [s.name for s in man.stages] == ["render", "reconstruct", "unwrap", "bake", "evaluate",
                                            "inspect"]
    assert man.verify() == []
    assert json.loads((tmp_path / "report.json").read_text()) == rep
    assert pio.load_stack(tmp_path / "render").depth.tobytes() == stack("sphere").depth.tobytes()


def test_roundtrip_corrupted_stack_aborts_at_reconstruct(tmp_path):
    def corrupt(s):
        d = s.depth.copy()
        y, x = np.argwhere(s.valid[1])[0]
        d[1, y, x] = d[0, y, x] * 0.5
        return s.replace(depth=d)

    with pytest.raises(StageFailed) as info:
        run_roundtrip(make_scene("sphere"), RoundtripParams(**FAST), tmp_path,
                      stack_filter=corrupt)
    assert info.value.stage == "reconstruct"
    assert isinstance(info.value.cause, InvalidStack)
    man = RunManifest.load(tmp_path / "manifest.json")
    assert [(s.name, s.status) for s in man.stages] == [("render", "ok"),
                                                         ("reconstruct", "failed")]
    assert "InvalidStack" in man.stages[-1].error


def test_roundtrip_threshold_failure_reported():
    params = RoundtripParams(**FAST, labels=[9])
    params.thresholds["iou_min"] = 1.01  # unreachable
    rep = run_roundtrip(make_scene("cylinder_skirt"), params)
    assert rep["pass"] is False and rep["checks"]["iou_9"] is False
