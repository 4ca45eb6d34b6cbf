"""Command line front end: ``peelkit <subcommand> ...``.

Exit codes: 0 pass, 1 threshold failure (or failed verification), 2 input
error, 3 internal error.  Reports go to stdout (and ``--report`` files) as
JSON; errors go to stderr as JSON.

Every option can also come from ``--config file.json``.  The file holds
option names with underscores as keys, either at top level or inside a
section named after the subcommand (section keys win over top-level keys);
flags given on the command line win over both.  Top-level keys that belong
to other subcommands are ignored, so one file can serve a whole run; keys
no subcommand knows are an input error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as pio
from .core import (DimensionMismatch, EmptyInput, InvalidStack, NonPositiveDepth, PinholeCamera,
                   PointBehindCamera, TriMesh, concat_meshes)
from .fixtures import FIXTURES, TEXTURES, UnknownFixture, default_camera, make_scene
from .pipeline import (DEFAULT_THRESHOLDS, RoundtripParams, RunManifest, StageFailed, evaluate,
                       load_layered, load_scene, make_fixture, run_roundtrip, save_contact_sheet,
                       save_layered, save_unwrap, stack_files, unwrap, write_json)
from .reconstruct import backproject, extract_garment, reconstruct_label
from .render import Scene, peel_render
from .texture import (CameraMismatch, MissingPatch, NoBoundary, bake_faces, chart_origin,
                      dilate_gutter, inpaint)

EXIT_PASS, EXIT_FAIL, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3

INPUT_ERRORS = (OSError, ValueError, KeyError, UnknownFixture, InvalidStack, DimensionMismatch,
                EmptyInput, MissingPatch, CameraMismatch, NonPositiveDepth, PointBehindCamera,
                NoBoundary)

DEFAULTS = {
    "fixture": {"name": None, "resolution": 128, "texture": "checker", "subdivisions": 4,
                "out": None},
    "render": {"scene": None, "mesh": None, "labels": None, "camera": None, "resolution": None,
               "layers": 4, "threads": 1, "out": None},
    "reconstruct": {"stack": None, "labels": None, "tau_disc": None, "eps_weld": None,
                    "max_bridge": None, "fill_mesh": None, "out": None, "out_cloud": None},
    "unwrap": {"mesh": None, "resolution": 1024, "gutter": 2, "out": None},
    "bake": {"atlas_layout": None, "stack": None, "mesh": None, "resolution": None,
             "inpaint": "exemplar", "patch": None, "gutter": 2, "tau_z": None, "seed": 0,
             "out": None, "out_mask": None},
    "evaluate": {"pred_stack": None, "gt_stack": None, "pred_mesh": None, "gt_mesh": None,
                 "classes": "5,9", "samples": 20000, "seed": 0, "max_p2s": None,
                 "min_iou": None, "max_nre": None, "report": None},
    "roundtrip": {"fixture": None, "scene": None, "resolution": 128, "texture": "checker",
                  "layers": 4, "threads": 1, "atlas_resolution": 512, "gutter": 2,
                  "inpaint": "exemplar", "seed": 0, "tau_disc": None, "eps_weld": None,
                  "max_bridge": None, "tau_z": None, "p2s_samples": 20000, "labels": None,
                  "max_p2s_footprints": DEFAULT_THRESHOLDS["p2s_footprints"],
                  "min_texture_match": DEFAULT_THRESHOLDS["texture_match"],
                  "min_iou": DEFAULT_THRESHOLDS["iou_min"], "max_nre": DEFAULT_THRESHOLDS["nre_max"],
                  "out": None, "report": None},
    "verify": {"manifest": None},
}
REQUIRED = {
    "fixture": ("name", "out"), "render": ("out",), "reconstruct": ("stack", "out"),
    "unwrap": ("mesh", "out"), "bake": ("atlas_layout", "stack", "mesh", "out"),
    "evaluate": ("pred_stack", "gt_stack"), "roundtrip": (), "verify": ("manifest",),
}


def _labels(text):
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    return [int(t) for t in str(text).split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="peelkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file with option defaults")
        return s

    s = cmd("fixture", "write a procedural test scene")
    s.add_argument("--name", choices=FIXTURES)
    s.add_argument("--resolution", type=int)
    s.add_argument("--texture", choices=TEXTURES)
    s.add_argument("--subdivisions", type=int)
    s.add_argument("--out")

    s = cmd("render", "render a peel stack from a scene")
    s.add_argument("--scene", help="fixture directory (scene.obj, labels.json, camera.json)")
    s.add_argument("--mesh", nargs="+", action="extend", help="OBJ file(s) instead of --scene")
    s.add_argument("--labels", help="JSON with face_labels for the concatenated meshes "
                                    "(default: usemtl label_<id> groups)")
    s.add_argument("--camera", help="camera JSON (default: fixture camera)")
    s.add_argument("--resolution", type=int)
    s.add_argument("--layers", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--out")

    s = cmd("reconstruct", "mesh a peel stack per garment label")
    s.add_argument("--stack", help="stack directory or stack.json")
    s.add_argument("--labels", "--label", dest="labels",
                   help="comma separated label ids (default: all present)")
    s.add_argument("--tau-disc", type=float)
    s.add_argument("--eps-weld", type=float)
    s.add_argument("--max-bridge", type=float)
    s.add_argument("--fill-mesh")
    s.add_argument("--out", help="output directory, or mesh .obj path for a single label")
    s.add_argument("--out-cloud", help="PLY of the garment's back-projected points (single label)")

    s = cmd("unwrap", "partition, flatten and pack a reconstructed garment")
    s.add_argument("--mesh", help="OBJ written by reconstruct (with its .layers.json)")
    s.add_argument("--resolution", type=int)
    s.add_argument("--gutter", type=int)
    s.add_argument("--out")

    s = cmd("bake", "bake and inpaint an atlas texture from a peel stack")
    s.add_argument("--atlas-layout")
    s.add_argument("--stack")
    s.add_argument("--mesh", help="uv OBJ written by unwrap")
    s.add_argument("--resolution", type=int)
    s.add_argument("--inpaint", choices=("diffusion", "exemplar", "patch_tile"))
    s.add_argument("--patch")
    s.add_argument("--gutter", type=int)
    s.add_argument("--tau-z", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="texture PNG")
    s.add_argument("--out-mask")

    s = cmd("evaluate", "metrics and losses between predicted and ground-truth stacks")
    s.add_argument("--pred-stack")
    s.add_argument("--gt-stack")
    s.add_argument("--pred-mesh")
    s.add_argument("--gt-mesh")
    s.add_argument("--classes")
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-p2s", type=float)
    s.add_argument("--min-iou", type=float)
    s.add_argument("--max-nre", type=float)
    s.add_argument("--report")

    s = cmd("roundtrip", "render -> reconstruct -> unwrap -> bake -> evaluate")
    s.add_argument("--fixture", choices=FIXTURES)
    s.add_argument("--scene")
    s.add_argument("--resolution", type=int)
    s.add_argument("--texture", choices=TEXTURES)
    s.add_argument("--layers", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--atlas-resolution", type=int)
    s.add_argument("--gutter", type=int)
    s.add_argument("--inpaint", choices=("diffusion", "exemplar"))
    s.add_argument("--seed", type=int)
    s.add_argument("--tau-disc", type=float)
    s.add_argument("--eps-weld", type=float)
    s.add_argument("--max-bridge", type=float)
    s.add_argument("--tau-z", type=float)
    s.add_argument("--p2s-samples", type=int)
    s.add_argument("--labels")
    s.add_argument("--max-p2s-footprints", type=float)
    s.add_argument("--min-texture-match", type=float)
    s.add_argument("--min-iou", type=float)
    s.add_argument("--max-nre", type=float)
    s.add_argument("--out")
    s.add_argument("--report")

    s = cmd("verify", "re-hash the files listed in a run manifest")
    s.add_argument("--manifest")
    return p


def resolve(args) -> dict:
    """Merge defaults, config file and flags (flags win)."""
    cmd = args.command
    opts = dict(DEFAULTS[cmd])
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise ValueError("config file must hold a JSON object")
        section = cfg.get(cmd, {})
        for src in (cfg, section):
            for k, v in src.items():
                if k in opts and not isinstance(v, dict):
                    opts[k] = v
        known = {k for d in DEFAULTS.values() for k in d} | set(DEFAULTS)
        unknown = [k for k in cfg if k not in known] + [k for k in section if k not in opts]
        if unknown:
            raise ValueError(f"unknown config keys for {cmd}: {sorted(unknown)}")
    for k in opts:
        v = getattr(args, k, None)
        if v is not None:
            opts[k] = v
    missing = [k for k in REQUIRED[cmd] if opts.get(k) is None]
    if missing:
        raise ValueError(f"{cmd}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return opts


def _emit(data, path=None):
    text = json.dumps(data, indent=2, sort_keys=True)
    if path:
        write_json(path, data)
    print(text)


# --- subcommands --------------------------------------------------------------

def cmd_fixture(o):
    paths = make_fixture(o["name"], o["out"], o["resolution"], o["texture"], o["subdivisions"])
    _emit({"fixture": o["name"], "files": paths})
    return EXIT_PASS


def _render_scene(o):
    if (o["scene"] is None) == (o["mesh"] is None):
        raise ValueError("render needs exactly one of --scene or --mesh")
    camera = None
    if o["camera"]:
        camera = PinholeCamera.from_dict(json.loads(Path(o["camera"]).read_text()))
    if o["scene"]:
        p = Path(o["scene"])
        return load_scene(p, camera, o["resolution"]), [p / "scene.obj" if p.is_dir() else p]
    paths = [Path(m) for m in o["mesh"]]
    mesh = concat_meshes([pio.load_obj(m) for m in paths])
    if o["labels"]:
        info = json.loads(Path(o["labels"]).read_text())
        mesh.face_labels = np.asarray(info["face_labels"] if isinstance(info, dict) else info,
                                      np.int64)
        paths.append(Path(o["labels"]))
    if mesh.face_labels is None or len(mesh.face_labels) != mesh.n_faces:
        raise ValueError("every face needs a label (usemtl label_<id> groups or --labels)")
    if camera is None:
        camera = default_camera(o["resolution"] or 128)
    elif o["resolution"] and camera.width != o["resolution"]:
        raise ValueError("--resolution conflicts with the camera file")
    if o["camera"]:
        paths.append(Path(o["camera"]))
    return Scene([mesh], camera), paths


def cmd_render(o):
    t = time.perf_counter()
    scene, inputs = _render_scene(o)
    stack = peel_render(scene, o["layers"], threads=o["threads"])
    out = Path(o["out"])
    manifest = pio.save_stack(stack, out)
    sheet = save_contact_sheet(stack, out / "peel_layers.png")
    man = RunManifest(out)
    man.record("render", inputs=inputs, outputs=stack_files(out) + [sheet],
               params={"layers": o["layers"], "threads": o["threads"],
                       "resolution": stack.camera.width},
               seconds=time.perf_counter() - t)
    man.save()
    _emit({"stack": str(manifest), "layers": stack.layers,
           "valid_pixels": [int(v.sum()) for v in stack.valid]})
    return EXIT_PASS


def cmd_reconstruct(o):
    t = time.perf_counter()
    stack = pio.load_stack(o["stack"])
    labels = _labels(o["labels"])
    if labels is None:
        labels = sorted(int(l) for l in np.unique(stack.seg) if l != 0)
    out = Path(o["out"])
    single = out.suffix.lower() == ".obj"
    if (single or o["out_cloud"]) and len(labels) != 1:
        raise ValueError("a mesh .obj --out or --out-cloud needs exactly one --label")
    fill = pio.load_obj(o["fill_mesh"]) if o["fill_mesh"] else None
    files, summary = [], {}
    for l in labels:
        lm = reconstruct_label(stack, l, o["tau_disc"], o["eps_weld"], o["max_bridge"], fill)
        files += save_layered(lm, out if single else out / f"garment_{l}.obj")
        summary[str(l)] = {"vertices": lm.mesh.n_vertices, "faces": lm.mesh.n_faces}
    if o["out_cloud"]:
        cloud = extract_garment(backproject(stack), labels[0])
        Path(o["out_cloud"]).parent.mkdir(parents=True, exist_ok=True)
        pio.save_ply(cloud, o["out_cloud"])
        files.append(Path(o["out_cloud"]))
        summary[str(labels[0])]["points"] = len(cloud)
    root = out.parent if single else out
    man = RunManifest(root)
    ins = stack_files(o["stack"]) + ([Path(o["fill_mesh"])] if o["fill_mesh"] else [])
    man.record("reconstruct", inputs=ins, outputs=files,
               params={k: o[k] for k in ("labels", "tau_disc", "eps_weld", "max_bridge")},
               seconds=time.perf_counter() - t)
    man.save(root / (f"{out.stem}_manifest.json" if single else "manifest.json"))
    _emit({"garments": summary})
    return EXIT_PASS


def cmd_unwrap(o):
    t = time.perf_counter()
    mesh_path = Path(o["mesh"])
    lm = load_layered(mesh_path)
    parts, atlas = unwrap(lm, o["resolution"], o["gutter"])
    out = Path(o["out"])
    files = save_unwrap(parts, atlas, out, mesh_path.stem)
    man = RunManifest(out)
    man.record("unwrap", inputs=[mesh_path, mesh_path.with_suffix(".layers.json")], outputs=files,
               params={"resolution": o["resolution"], "gutter": o["gutter"]},
               seconds=time.perf_counter() - t)
    man.save()
    _emit({"partitions": len(parts), "charts": len(atlas.charts),
           "flipped": int(sum(c.flipped for c in atlas.charts)),
           "max_residual": max(c.residual for c in atlas.charts),
           "utilization": atlas.utilization()})
    return EXIT_PASS


def cmd_bake(o):
    t = time.perf_counter()
    layout = json.loads(Path(o["atlas_layout"]).read_text())
    stack = pio.load_stack(o["stack"])
    mesh = pio.load_obj(o["mesh"])
    if mesh.uv is None:
        raise ValueError(f"{o['mesh']}: no texture coordinates")
    R = int(o["resolution"] or layout["resolution"])
    charts = layout["charts"]
    chart_of_face = np.full(mesh.n_faces, -1, np.int64)
    for k, c in enumerate(charts):
        a, b = c["faces"]
        chart_of_face[a:b] = k
    if np.any(chart_of_face < 0):
        raise ValueError("atlas layout does not cover every face of the mesh")
    scale = R / layout["resolution"]
    origins = []
    for c in charts:
        x, y, w, h = (int(round(v * scale)) for v in c["rect"])
        origins.append(chart_origin((x, y, w, h), R, int(round(layout["gutter"] * scale))))
    uv = mesh.corner_uv()
    img, mask = bake_faces(mesh.vertices[mesh.faces], uv, chart_of_face,
                           [c["layer"] for c in charts], stack, R, origins, o["tau_z"])
    patch = pio.read_png(o["patch"], "RGB") if o["patch"] else None
    mode = o["inpaint"]
    filled = inpaint(img, mask, mode, patch, seed=o["seed"]) if mask.unfilled.any() else img
    final = dilate_gutter(filled, mask, o["gutter"])
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    pio.write_png(out, final.rgb)
    mask_path = Path(o["out_mask"]) if o["out_mask"] else out.with_name(out.stem + "_mask.png")
    pio.write_png(mask_path, mask.to_png_array())
    obj = out.with_suffix(".obj")
    pio.save_obj(TriMesh(mesh.vertices, mesh.faces, face_labels=mesh.face_labels, uv=mesh.uv,
                         face_uv=mesh.face_uv), obj, texture_path=out)
    man = RunManifest(out.parent)
    man.record("bake", inputs=[Path(o["atlas_layout"]), Path(o["mesh"])] + stack_files(o["stack"])
               + ([Path(o["patch"])] if o["patch"] else []),
               outputs=[out, mask_path, obj, obj.with_suffix(".mtl")],
               params={"resolution": R, "inpaint": mode, "gutter": o["gutter"], "tau_z": o["tau_z"],
                       "seed": o["seed"]},
               seconds=time.perf_counter() - t)
    man.save(out.parent / f"{out.stem}_manifest.json")
    counts = np.bincount(mask.state.ravel(), minlength=3)
    _emit({"texture": str(out), "mask": str(mask_path),
           "outside": int(counts[0]), "unfilled": int(counts[1]), "filled": int(counts[2])})
    return EXIT_PASS


def cmd_evaluate(o):
    pred = pio.load_stack(o["pred_stack"])
    gt = pio.load_stack(o["gt_stack"])
    pm = pio.load_obj(o["pred_mesh"]) if o["pred_mesh"] else None
    gm = pio.load_obj(o["gt_mesh"]) if o["gt_mesh"] else None
    rep = evaluate(pred, gt, pm, gm, _labels(o["classes"]), o["samples"], o["seed"])
    checks = {}
    if o["max_p2s"] is not None and "p2s" in rep:
        checks["p2s"] = rep["p2s"] <= o["max_p2s"]
    if o["min_iou"] is not None:
        for c, v in rep["iou"].items():
            checks[f"iou_{c}"] = v >= o["min_iou"]
    if o["max_nre"] is not None:
        checks["nre"] = rep["nre"] is not None and rep["nre"] <= o["max_nre"]
    rep["checks"] = checks
    rep["pass"] = all(checks.values())
    if o["report"]:
        rp = Path(o["report"])
        write_json(rp, rep)
        man = RunManifest(rp.parent)
        ins = stack_files(o["pred_stack"]) + stack_files(o["gt_stack"])
        ins += [Path(p) for p in (o["pred_mesh"], o["gt_mesh"]) if p]
        man.record("evaluate", inputs=ins, outputs=[rp], params={"classes": o["classes"]})
        man.save(rp.parent / f"{rp.stem}_manifest.json")
    _emit(rep)
    return EXIT_PASS if rep["pass"] else EXIT_FAIL


def cmd_roundtrip(o):
    if (o["fixture"] is None) == (o["scene"] is None):
        raise ValueError("roundtrip needs exactly one of --fixture or --scene")
    if o["fixture"]:
        scene = make_scene(o["fixture"], o["resolution"], o["texture"])
    else:
        scene = load_scene(o["scene"], resolution=o["resolution"])
    params = RoundtripParams(
        layers=o["layers"], tau_disc=o["tau_disc"], eps_weld=o["eps_weld"],
        max_bridge=o["max_bridge"], tau_z=o["tau_z"], atlas_resolution=o["atlas_resolution"],
        gutter=o["gutter"], inpaint=o["inpaint"], seed=o["seed"], p2s_samples=o["p2s_samples"],
        labels=_labels(o["labels"]),
        thresholds={"p2s_footprints": o["max_p2s_footprints"],
                    "texture_match": o["min_texture_match"], "iou_min": o["min_iou"],
                    "nre_max": o["max_nre"], "max_flips": 0})
    report = run_roundtrip(scene, params, o["out"], threads=o["threads"],
                           name=o["fixture"] or str(o["scene"]))
    _emit(report, o["report"])
    return EXIT_PASS if report["pass"] else EXIT_FAIL


def cmd_verify(o):
    man = RunManifest.load(o["manifest"])
    problems = man.verify()
    n = sum(len(s.inputs) + len(s.outputs) for s in man.stages)
    _emit({"manifest": str(o["manifest"]), "files": n, "ok": not problems, "problems": problems})
    return EXIT_PASS if not problems else EXIT_FAIL


COMMANDS = {"fixture": cmd_fixture, "render": cmd_render, "reconstruct": cmd_reconstruct,
            "unwrap": cmd_unwrap, "bake": cmd_bake, "evaluate": cmd_evaluate,
            "roundtrip": cmd_roundtrip, "verify": cmd_verify}


def _error(exc, code, stage=None):
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if stage:
        err["stage"] = stage
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except StageFailed as exc:
        code = EXIT_INPUT if isinstance(exc.cause, INPUT_ERRORS) else EXIT_INTERNAL
        return _error(exc.cause, code, exc.stage)
    except INPUT_ERRORS as exc:
        return _error(exc, EXIT_INPUT)
    except Exception as exc:  # noqa: BLE001 - anything else is a bug
        return _error(exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
