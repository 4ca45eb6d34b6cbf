import numpy as np
import pytest
from hypothesis import given, strategies as st

from peelkit import (DimensionMismatch, LabeledPointCloud, LayeredMesh, NonPositiveDepth,
                     PeelStack, PinholeCamera, PointBehindCamera, TriMesh, project, unproject,
                     validate_stack)
from peelkit import io as pio

from conftest import FIXTURE_LABELS, stack


def cam128():
    return PinholeCamera(128, 128, 100.0, 100.0, 64.0, 64.0)


def rot(axis, angle):
    axis = np.asarray(axis, float) / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


# --- camera -------------------------------------------------------------------

def test_project_on_axis():
    px, z = project(cam128(), [0, 0, 2])
    assert np.allclose(px, [64, 64]) and z == 2.0


def test_project_offset_point():
    px, z = project(cam128(), [0.1, 0, 2])
    assert np.allclose(px, [69, 64]) and z == 2.0


def test_project_behind_camera():
    with pytest.raises(PointBehindCamera):
        project(cam128(), [0, 0, 0])


def test_unproject_examples():
    cam = cam128()
    assert np.allclose(unproject(cam, [64, 64], 1.0), [0, 0, 1])
    assert np.allclose(unproject(cam, [69, 64], 2.0), [0.1, 0, 2])
    with pytest.raises(NonPositiveDepth):
        unproject(cam, [64, 64], 0.0)


def test_camera_invariants_rejected():
    with pytest.raises(ValueError):
        PinholeCamera(128, 128, -1.0, 100.0, 64, 64)
    with pytest.raises(ValueError):
        PinholeCamera(128, 128, 100.0, 100.0, 128, 64)
    with pytest.raises(ValueError):
        PinholeCamera(128, 128, 100.0, 100.0, 64, 64, rotation=np.diag([1.0, 1.0, -1.0]))


def test_unproject_project_1000_points(rng):
    cam = PinholeCamera(160, 120, 110.0, 95.0, 80.3, 59.1, rot([1, 2, 3], 0.4), [0.1, -0.2, 3.0])
    pts = rng.uniform(-1, 1, (1000, 3))
    px, z = project(cam, pts)
    back = unproject(cam, px, z)
    assert np.abs(back - pts).max() < 1e-6


@given(st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.floats(0.5, 20),
       st.floats(0, 2 * np.pi))
def test_project_unproject_inverse(x, y, z, ang):
    cam = PinholeCamera(64, 48, 50.0, 60.0, 31.5, 23.5, rot([0.3, 1, 0.1], ang), [0, 0, 0])
    pc = np.array([x * z, y * z, z])
    pw = cam.to_world(pc)
    px, d = project(cam, pw)
    assert abs(d - z) <= 1e-6 * z
    p2, d2 = project(cam, unproject(cam, px, d))
    assert np.allclose(p2, px, rtol=1e-6, atol=1e-9) and abs(d2 - d) <= 1e-6 * d


def test_footprint_formula():
    cam = PinholeCamera.from_fov(128, 128, 70.0)
    assert np.isclose(cam.footprint(2.0), 2.0 * 2 * np.tan(np.radians(35)) / 128)


# --- stack validation ---------------------------------------------------------

@pytest.mark.parametrize("name", sorted(FIXTURE_LABELS))
def test_rendered_fixture_stacks_validate(name):
    assert validate_stack(stack(name)) == []


def _sphere_pixel_with_two_layers():
    s = stack("sphere")
    y, x = np.argwhere(s.valid[0] & s.valid[1])[0]
    return s, int(x), int(y)


def test_validate_monotonicity_fault():
    s, x, y = _sphere_pixel_with_two_layers()
    d = s.depth.copy()
    d[1, y, x] = d[0, y, x] * 0.5
    v = validate_stack(s.replace(depth=d))
    assert len(v) == 1 and v[0].rule == "monotonicity" and (v[0].x, v[0].y) == (x, y)


def test_validate_coherence_fault():
    s = stack("sphere")
    y, x = np.argwhere(~s.valid[0])[0]
    seg = s.seg.copy()
    seg[0, y, x] = 5
    v = validate_stack(s.replace(seg=seg))
    assert len(v) == 1 and v[0].rule == "coherence" and (v[0].x, v[0].y) == (x, y)


def test_validate_normal_length_fault():
    s, x, y = _sphere_pixel_with_two_layers()
    n = s.normal.copy()
    n[0, y, x] *= 1.01
    v = validate_stack(s.replace(normal=n))
    assert [r.rule for r in v] == ["normal_length"]


def test_stack_dimension_mismatch():
    s = stack("sphere")
    with pytest.raises(DimensionMismatch):
        PeelStack(s.camera, s.depth, s.rgb[:, :-1], s.seg, s.normal)


def test_stack_is_immutable():
    s = stack("sphere")
    with pytest.raises(ValueError):
        s.depth[0, 0, 0] = 1.0


# --- meshes and clouds ----------------------------------------------------------

def test_trimesh_rejects_bad_faces():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 3]])
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), [[0, 1, 1]])
    with pytest.raises(ValueError):
        TriMesh(np.eye(3), [[0, 1, 2]], normals=np.ones((3, 3)))


def test_point_cloud_invariants():
    with pytest.raises(ValueError):
        LabeledPointCloud(np.zeros((2, 3)), np.zeros((2, 3)), [1, 0], [1, 1], np.zeros((2, 3)))
    with pytest.raises(ValueError):
        LabeledPointCloud(np.zeros((2, 3)), np.zeros((1, 3)), [1, 1], [1, 1], np.zeros((2, 3)))


def test_layered_mesh_length():
    with pytest.raises(ValueError):
        LayeredMesh(TriMesh(np.eye(3), [[0, 1, 2]]), [1, 1])


# --- file formats -----------------------------------------------------------------

def test_stack_roundtrip_bit_identical(tmp_path):
    s = stack("two_garment_mannequin")
    manifest = pio.save_stack(s, tmp_path / "st")
    t = pio.load_stack(manifest)
    assert t.camera == s.camera
    assert s.depth.tobytes() == t.depth.tobytes()
    assert s.normal.tobytes() == t.normal.tobytes()
    assert np.array_equal(s.rgb, t.rgb) and np.array_equal(s.seg, t.seg)


def test_pfm_little_endian_header(tmp_path):
    img = np.arange(12, dtype=np.float32).reshape(3, 4)
    pio.write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n4 3\n-1")
    assert np.array_equal(pio.read_pfm(tmp_path / "a.pfm"), img)


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([1, 3]))
def test_pfm_roundtrip_property(h, w, c):
    import tempfile
    from pathlib import Path
    img = np.random.default_rng(h * 31 + w).normal(size=(h, w, c) if c == 3 else (h, w))
    img = img.astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        pio.write_pfm(Path(d) / "x.pfm", img)
        assert pio.read_pfm(Path(d) / "x.pfm").tobytes() == img.tobytes()


def test_obj_roundtrip(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.5]], float)
    m = TriMesh(v, [[0, 1, 2], [1, 3, 2]], face_labels=[5, 9], uv=v[:, :2] * 0.5)
    pio.save_obj(m, tmp_path / "m.obj")
    r = pio.load_obj(tmp_path / "m.obj")
    assert np.array_equal(r.vertices, m.vertices) and np.array_equal(r.faces, m.faces)
    assert np.array_equal(r.face_labels, [5, 9])
    assert np.allclose(r.corner_uv(), m.corner_uv())


def test_ply_roundtrip(tmp_path):
    from peelkit import backproject
    pc = backproject(stack("sphere"))
    pio.save_ply(pc, tmp_path / "c.ply")
    r = pio.load_ply(tmp_path / "c.ply")
    assert np.array_equal(r.points, pc.points)
    assert np.array_equal(r.labels, pc.labels) and np.array_equal(r.layer_ids, pc.layer_ids)
    assert (tmp_path / "c.ply").read_bytes().startswith(b"ply\nformat ascii 1.0")
