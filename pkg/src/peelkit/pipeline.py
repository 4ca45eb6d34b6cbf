"""End-to-end orchestration: fixtures on disk, run manifests, the render -> reconstruct ->
unwrap -> bake -> evaluate round trip, and inspection images."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from . import io as pio
from .core import FILL, PeelError, PeelStack, TriMesh, concat_meshes, project
from .fixtures import FIXTURES, UnknownFixture, default_camera, make_scene
from .flatten import UVAtlas, flatten_partitions, pack_atlas
from .metrics import loss_components, combine_losses, PAPER_WEIGHTS, iou, nre, p2s, sample_surface
from .reconstruct import reconstruct_label
from .render import Scene, _SceneArrays, cast_rays, peel_render, shade_hits
from .seams import partition_mesh
from .texture import (TextureImage, ValidityMask, bake, chart_origin, dilate_gutter, inpaint,
                      rasterize_chart)
from .topology import boundary_edges

MANIFEST_SCHEMA = "peelrun/1"
REPORT_SCHEMA = "peelreport/1"
LABEL_NAMES = {5: "upper_clothes", 9: "pants", 10: "torso_skin"}


class StageFailed(PeelError):
    def __init__(self, stage: str, cause: BaseException, manifest_path=None):
        self.stage = stage
        self.cause = cause
        self.manifest_path = manifest_path
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


# --- manifests ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class StageRecord:
    name: str
    inputs: Dict[str, str] = field(default_factory=dict)  # relative path -> sha256
    outputs: Dict[str, str] = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    seconds: float = 0.0
    status: str = "ok"
    error: Optional[str] = None


@dataclass
class RunManifest:
    root: Path
    stages: List[StageRecord] = field(default_factory=list)
    schema: str = MANIFEST_SCHEMA

    def _rel(self, p) -> str:
        p = Path(p).resolve()
        try:
            return p.relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return str(p)

    def _abs(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def record(self, name, inputs=(), outputs=(), params=None, seconds=0.0, status="ok",
               error=None) -> StageRecord:
        for p in list(inputs) + list(outputs):
            if not Path(p).exists():
                raise FileNotFoundError(f"manifest path {p} does not exist")
        rec = StageRecord(name, {self._rel(p): sha256_file(p) for p in inputs},
                          {self._rel(p): sha256_file(p) for p in outputs},
                          _jsonable(params or {}), float(seconds), status, error)
        self.stages.append(rec)
        return rec

    def to_dict(self) -> dict:
        return {"schema": self.schema, "stages": [asdict(s) for s in self.stages]}

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ValueError(f"{path}: not a {MANIFEST_SCHEMA} manifest")
        return cls(path.parent, [StageRecord(**s) for s in d["stages"]])

    def verify(self) -> List[dict]:
        """Re-hash every listed file; returns one entry per missing or changed file."""
        problems = []
        for s in self.stages:
            for kind in ("inputs", "outputs"):
                for rel, digest in getattr(s, kind).items():
                    p = self._abs(rel)
                    if not p.exists():
                        problems.append({"stage": s.name, "path": rel, "problem": "missing"})
                    elif sha256_file(p) != digest:
                        problems.append({"stage": s.name, "path": rel, "problem": "hash mismatch"})
        return problems


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


# --- fixtures on disk ---------------------------------------------------------

def make_fixture(name: str, out_dir, resolution: int = 128, texture: str = "checker",
                 subdivisions: int = 4) -> dict:
    """Write a fixture scene: scene.obj (label groups, uv), labels.json, texture.png, camera.json."""
    if name not in FIXTURES:
        raise UnknownFixture(f"unknown fixture {name!r}; expected one of {FIXTURES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(name, resolution, texture, subdivisions)
    mesh = concat_meshes(scene.meshes)
    paths = {"obj": out / "scene.obj", "labels": out / "labels.json",
             "texture": out / "texture.png", "camera": out / "camera.json"}
    pio.save_obj(mesh, paths["obj"])
    pio.write_png(paths["texture"], scene.meshes[0].texture)
    labs, counts = np.unique(mesh.face_labels, return_counts=True)
    write_json(paths["labels"], {
        "fixture": name, "texture": texture,
        "labels": {str(int(l)): {"name": LABEL_NAMES.get(int(l), f"label_{int(l)}"), "faces": int(c)}
                   for l, c in zip(labs, counts)},
        "face_labels": mesh.face_labels.tolist(),
    })
    write_json(paths["camera"], scene.camera.to_dict())
    man = RunManifest(out)
    man.record("fixture", outputs=list(paths.values()),
               params={"name": name, "resolution": resolution, "texture": texture,
                       "subdivisions": subdivisions})
    man.save()
    return {k: str(v) for k, v in paths.items()}


def load_scene(path, camera=None, resolution: Optional[int] = None) -> Scene:
    """Load a scene written by :func:`make_fixture` (directory or OBJ path)."""
    p = Path(path)
    obj = p / "scene.obj" if p.is_dir() else p
    base = obj.parent
    mesh = pio.load_obj(obj)
    labels_file = base / "labels.json"
    if labels_file.exists():
        info = json.loads(labels_file.read_text())
        if "face_labels" in info:
            mesh.face_labels = np.asarray(info["face_labels"], np.int64)
    tex = base / "texture.png"
    if mesh.texture is None and tex.exists() and mesh.uv is not None:
        mesh.texture = pio.read_png(tex, "RGB")
    if mesh.face_labels is None:
        raise ValueError(f"{obj}: no face labels (usemtl label_<id> groups or labels.json)")
    if camera is None:
        cam_file = base / "camera.json"
        if cam_file.exists():
            from .core import PinholeCamera
            camera = PinholeCamera.from_dict(json.loads(cam_file.read_text()))
        else:
            camera = default_camera(resolution or 128)
    if resolution is not None and camera.width != resolution:
        camera = default_camera(resolution)
    return Scene([mesh], camera)


# --- round trip ---------------------------------------------------------------

DEFAULT_THRESHOLDS = {
    "p2s_footprints": 2.0,  # P2S <= this many mean pixel footprints
    "texture_match": 0.95,  # fraction of FILLED texels within 2/255 of the oracle
    "iou_min": 0.9,
    "nre_max": 0.1,
    "max_flips": 0,
}


@dataclass
class RoundtripParams:
    layers: int = 4
    tau_disc: Optional[float] = None
    eps_weld: Optional[float] = None
    max_bridge: Optional[float] = None
    tau_z: Optional[float] = None
    atlas_resolution: int = 512
    gutter: int = 2
    inpaint: str = "exemplar"
    seed: int = 0
    p2s_samples: int = 20000
    labels: Optional[Sequence[int]] = None
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["labels"] = None if self.labels is None else [int(l) for l in self.labels]
        return d


@dataclass
class GarmentResult:
    label: int
    layered: object  # LayeredMesh
    atlas: UVAtlas
    texture: TextureImage
    mask: ValidityMask
    textured_mesh: TriMesh
    chart_faces: list
    final: Optional[TextureImage] = None  # inpainted and gutter-dilated


def textured_mesh(atlas: UVAtlas, texture: Optional[np.ndarray] = None):
    """All charts as one mesh with atlas uv; seam vertices are duplicated per chart.

    Returns ``(mesh, chart_face_ranges)``.
    """
    verts, faces, uvs, labels, ranges = [], [], [], [], []
    nv = nf = 0
    for k, c in enumerate(atlas.charts):
        sub = c.partition.submesh
        verts.append(sub.vertices)
        faces.append(sub.faces + nv)
        uvs.append(atlas.atlas_uv(k))
        labels.append(sub.face_labels if sub.face_labels is not None
                      else np.zeros(sub.n_faces, np.int64))
        ranges.append((nf, nf + sub.n_faces))
        nv += sub.n_vertices
        nf += sub.n_faces
    mesh = TriMesh(np.concatenate(verts), np.concatenate(faces), face_labels=np.concatenate(labels),
                   uv=np.concatenate(uvs), texture=texture)
    return mesh, ranges


def unwrap(layered, resolution: int = 512, gutter: int = 2):
    """Partition by peel layer, flatten every chart and pack them into one atlas."""
    parts = partition_mesh(layered)
    charts = flatten_partitions(parts)
    return parts, pack_atlas(charts, resolution, gutter)


def texture_oracle(scene: Scene, atlas: UVAtlas, img: TextureImage, mask: ValidityMask):
    """Compare FILLED texels with the source scene's color at the same surface point.

    Each texel's 3D point is projected to its continuous pixel position, the
    ray through it is cast into the source scene, and the hit closest to the
    texel's depth is shaded.  Returns (match fraction within 2/255, mean abs error).
    """
    pts, cols = [], []
    R = atlas.resolution
    for k, c in enumerate(atlas.charts):
        sub = c.partition.submesh
        rr, cc, fid, bary = rasterize_chart(atlas.atlas_uv(k), sub.faces, R)
        ok = mask.state[rr, cc] == 2
        pts.append(np.einsum("nk,nkj->nj", bary[ok], sub.vertices[sub.faces[fid[ok]]]))
        cols.append(img.rgb[rr[ok], cc[ok]])
    if not pts or not sum(len(p) for p in pts):
        return 1.0, 0.0
    pts, cols = np.concatenate(pts), np.concatenate(cols).astype(np.int64)
    pix, z = project(scene.camera, pts)
    sa = _SceneArrays(scene)
    hits = cast_rays(sa.mesh, scene.camera, pix, 1e-6 * scene.diameter)
    d = np.abs(hits.z - z[hits.ray])
    o = np.lexsort((hits.face, d, hits.ray))
    first = np.ones(len(o), bool)
    first[1:] = hits.ray[o][1:] != hits.ray[o][:-1]
    sel = o[first]
    from .render import Hits
    best = Hits(hits.ray[sel], hits.z[sel], hits.face[sel], hits.bary[sel], hits.rank[sel])
    _, ref = shade_hits(sa, best)
    oracle = np.full_like(cols, -1000)
    oracle[best.ray] = ref
    err = np.abs(oracle - cols)
    match = np.all(err <= 2, axis=1)
    return float(match.mean()), float(np.minimum(err, 255).mean())


def evaluate(pred_stack: PeelStack, gt_stack: PeelStack, pred_mesh: Optional[TriMesh] = None,
             gt_mesh: Optional[TriMesh] = None, classes: Sequence[int] = (5, 9),
             samples: int = 20000, seed: int = 0) -> dict:
    """P2S (pred surface samples -> gt mesh), per-class IOU over all layers, NRE on the
    first layer and the four losses (per-valid-texel means) with the default weights."""
    out = {}
    if pred_mesh is not None and gt_mesh is not None:
        out["p2s"] = p2s(sample_surface(pred_mesh, samples, seed), gt_mesh)
    out["iou"] = {str(int(c)): iou(pred_stack.seg, gt_stack.seg, int(c)) for c in classes}
    try:
        out["nre"] = nre(pred_stack.normal[0], gt_stack.normal[0])
    except PeelError:
        out["nre"] = None
    comps = loss_components(pred_stack, gt_stack, mean=True)
    out["losses"] = comps
    out["total_loss"] = combine_losses(comps, PAPER_WEIGHTS)
    return out


def _timed(man, name, fn, params, out_dir, inputs=(), outputs_fn=None):
    t = time.perf_counter()
    try:
        result = fn()
    except Exception as exc:
        path = None
        if man is not None:
            man.record(name, params=params, seconds=time.perf_counter() - t, status="failed",
                       error=f"{type(exc).__name__}: {exc}")
            path = man.save()
        raise StageFailed(name, exc, path) from exc
    if man is not None:
        outs = outputs_fn(result) if outputs_fn else []
        man.record(name, inputs=inputs, outputs=outs, params=params, seconds=time.perf_counter() - t)
    return result


def run_roundtrip(scene: Scene, params: Optional[RoundtripParams] = None, out_dir=None,
                  threads: int = 1, stack_filter: Optional[Callable] = None,
                  name: Optional[str] = None) -> dict:
    """render -> reconstruct -> unwrap -> bake -> evaluate, returning a JSON-ready report.

    ``stack_filter`` may replace the rendered stack before reconstruction
    (fault injection).  With ``out_dir`` every stage writes its artifacts and
    a ``manifest.json``; a failing stage is recorded there before
    :class:`StageFailed` propagates.  The report holds no timings, so it is
    identical across repeated runs and thread counts.
    """
    params = params or RoundtripParams()
    out = Path(out_dir) if out_dir is not None else None
    man = RunManifest(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    labels = (sorted({int(l) for m in scene.meshes for l in np.unique(m.face_labels)})
              if params.labels is None else [int(l) for l in params.labels])

    def do_render():
        st = peel_render(scene, params.layers, threads=threads)
        return stack_filter(st) if stack_filter is not None else st

    gt = _timed(man, "render", do_render, {"layers": params.layers, "threads": threads}, out,
                outputs_fn=lambda st: stack_files(pio.save_stack(st, out / "render")))
    cam = gt.camera

    garments: Dict[int, GarmentResult] = {}
    layered = _timed(man, "reconstruct",
                     lambda: {l: reconstruct_label(gt, l, params.tau_disc, params.eps_weld,
                                                   params.max_bridge) for l in labels},
                     {"labels": labels, "tau_disc": params.tau_disc, "eps_weld": params.eps_weld,
                      "max_bridge": params.max_bridge}, out,
                     inputs=stack_files(out / "render") if out else (),
                     outputs_fn=lambda lm: _save_layered(lm, out / "reconstruct"))
    unwrapped = _timed(man, "unwrap",
                       lambda: {l: unwrap(layered[l], params.atlas_resolution, params.gutter)
                                for l in labels if layered[l].mesh.n_faces},
                       {"atlas_resolution": params.atlas_resolution, "gutter": params.gutter}, out,
                       outputs_fn=lambda u: _save_unwrapped(u, out / "unwrap"))

    def do_bake():
        res = {}
        for l, (_, atlas) in unwrapped.items():
            img, mask = bake(atlas, gt, layered[l], tau_z=params.tau_z)
            filled = inpaint(img, mask, params.inpaint, seed=params.seed) if mask.unfilled.any() else img
            final = dilate_gutter(filled, mask, params.gutter)
            tm, ranges = textured_mesh(atlas, final.rgb)
            res[l] = GarmentResult(l, layered[l], atlas, img, mask, tm, ranges, final)
        return res

    garments = _timed(man, "bake", do_bake, {"inpaint": params.inpaint, "seed": params.seed,
                                             "tau_z": params.tau_z}, out,
                      outputs_fn=lambda g: _save_baked(g, out / "bake"))

    def do_eval():
        return _evaluate_roundtrip(scene, gt, garments, layered, params, threads, labels)

    report = _timed(man, "evaluate", do_eval, {"thresholds": params.thresholds}, out)
    report["params"] = params.to_dict()
    if name is not None:
        report["fixture"] = name
    report = _jsonable(report)
    if out is not None:
        rp = write_json(out / "report.json", report)
        man.stages[-1].outputs[man._rel(rp)] = sha256_file(rp)
        inspect = out / "inspect"
        inspect.mkdir(exist_ok=True)
        files = [save_contact_sheet(gt, inspect / "peel_layers.png")]
        for l, g in garments.items():
            files.append(save_uv_wireframe(g.atlas, inspect / f"uv_{l}.png", g.final.rgb))
            files.append(save_distortion_heatmap(g.atlas, inspect / f"qc_{l}.png"))
        man.record("inspect", outputs=files)
        man.save()
    return report


def _evaluate_roundtrip(scene, gt, garments, layered, params, threads, labels) -> dict:
    th = {**DEFAULT_THRESHOLDS, **(params.thresholds or {})}
    cam = gt.camera
    report = {"schema": REPORT_SCHEMA, "resolution": [cam.width, cam.height], "layers": gt.layers,
              "labels": {}}
    checks = {}
    pred_meshes = []
    for l in labels:
        src = [m.submesh(m.face_labels == l) for m in scene.meshes if np.any(m.face_labels == l)]
        src = concat_meshes(src)
        lm = layered[l]
        ok = gt.valid & (gt.seg == l)
        fp = float(cam.footprint(gt.depth[ok].astype(np.float64)).mean()) if ok.any() else 0.0
        entry = {"vertices": lm.mesh.n_vertices, "faces": lm.mesh.n_faces,
                 "fill_vertices": int(np.count_nonzero(lm.vertex_layer == FILL)),
                 "boundary_edges": int(len(boundary_edges(lm.mesh.faces))),
                 "mean_footprint": fp}
        if lm.mesh.n_faces:
            val = p2s(sample_surface(lm.mesh, params.p2s_samples, params.seed), src)
            entry["p2s"] = val
            entry["p2s_limit"] = th["p2s_footprints"] * fp
            checks[f"p2s_{l}"] = val <= entry["p2s_limit"]
        if l in garments:
            g = garments[l]
            charts = g.atlas.charts
            qc = np.concatenate([c.qc_ratio for c in charts])
            flips = int(sum(c.flipped for c in charts))
            entry["charts"] = {
                "count": len(charts), "flipped": flips,
                "max_residual": max(c.residual for c in charts),
                "qc_p50": float(np.percentile(qc, 50)), "qc_p90": float(np.percentile(qc, 90)),
                "utilization": g.atlas.utilization(),
            }
            match, mae = texture_oracle(scene, g.atlas, g.texture, g.mask)
            counts = np.bincount(g.mask.state.ravel(), minlength=3)
            entry["texture"] = {"outside": int(counts[0]), "unfilled": int(counts[1]),
                                "filled": int(counts[2]), "match_fraction": match,
                                "mean_abs_error": mae}
            checks[f"flips_{l}"] = flips <= th["max_flips"]
            checks[f"texture_{l}"] = match >= th["texture_match"]
            pred_meshes.append(g.textured_mesh)
        report["labels"][str(l)] = entry
    if pred_meshes:
        pred = peel_render(Scene(pred_meshes, cam), gt.layers, threads=threads)
        ev = evaluate(pred, gt, classes=labels)
        report["iou"] = ev["iou"]
        report["nre"] = ev["nre"]
        report["losses"] = ev["losses"]
        report["total_loss"] = ev["total_loss"]
        for l in labels:
            checks[f"iou_{l}"] = ev["iou"][str(l)] >= th["iou_min"]
        checks["nre"] = ev["nre"] is not None and ev["nre"] <= th["nre_max"]
    report["checks"] = checks
    report["pass"] = bool(checks) and all(checks.values())
    return report


# --- stage artifact writers ---------------------------------------------------

def stack_files(path) -> list:
    d = Path(path)
    d = d if d.is_dir() else d.parent
    man = json.loads((d / "stack.json").read_text())
    files = [d / "stack.json"]
    for v in man["channels"].values():
        files += [d / f for f in v]
    return files


def save_layered(lm, obj_path) -> list:
    obj_path = Path(obj_path)
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    pio.save_obj(lm.mesh, obj_path)
    side = obj_path.with_suffix(".layers.json")
    write_json(side, {"vertex_layer": lm.vertex_layer.tolist(),
                      "vertex_source": None if lm.vertex_source is None else lm.vertex_source.tolist()})
    return [obj_path, side]


def load_layered(obj_path):
    from .core import LayeredMesh
    obj_path = Path(obj_path)
    mesh = pio.load_obj(obj_path)
    side = json.loads(obj_path.with_suffix(".layers.json").read_text())
    vs = side.get("vertex_source")
    return LayeredMesh(mesh, np.asarray(side["vertex_layer"], np.int64),
                       None if vs is None else np.asarray(vs, np.int64))


def _save_layered(layered, d) -> list:
    files = []
    for l, lm in layered.items():
        files += save_layered(lm, Path(d) / f"garment_{l}.obj")
    return files


def save_unwrap(parts, atlas: UVAtlas, d, stem: str) -> list:
    """Per-partition OBJs, a seams JSON, the atlas layout JSON and the uv-mapped OBJ."""
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for i, p in enumerate(parts):
        f = d / f"{stem}_part{i}_layer{p.layer}.obj"
        pio.save_obj(p.submesh, f)
        files.append(f)
    seam = sorted({int(v) for p in parts for v in p.vertex_origin_map[p.is_seam]})
    nf = sum(p.submesh.n_faces for p in parts)
    face_layer = np.zeros(nf, np.int64)
    for p in parts:
        face_layer[p.face_origin_map] = p.layer
    files.append(write_json(d / f"{stem}_seams.json",
                            {"seam_vertices": seam, "face_layer": face_layer.tolist()}))
    mesh, ranges = textured_mesh(atlas)
    layout = atlas.to_dict()
    for entry, r in zip(layout["charts"], ranges):
        entry["faces"] = list(r)
    files.append(write_json(d / f"{stem}_atlas.json", layout))
    obj = d / f"{stem}_uv.obj"
    pio.save_obj(mesh, obj)
    files.append(obj)
    return files


def _save_unwrapped(unwrapped, d) -> list:
    files = []
    for l, (parts, atlas) in unwrapped.items():
        files += save_unwrap(parts, atlas, d, f"garment_{l}")
    return files


def _save_baked(garments, d) -> list:
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for l, g in garments.items():
        tex = d / f"garment_{l}.png"
        pio.write_png(tex, g.final.rgb)
        mask = d / f"garment_{l}_mask.png"
        pio.write_png(mask, g.mask.to_png_array())
        obj = d / f"garment_{l}.obj"
        pio.save_obj(g.textured_mesh, obj, texture_path=tex)
        files += [tex, mask, obj, obj.with_suffix(".mtl")]
    return files


# --- inspection images --------------------------------------------------------

_SEG_COLORS = np.array([[0, 0, 0]] + [[(37 * i) % 256, (91 * i) % 256, (173 * i) % 256]
                                      for i in range(1, 256)], np.uint8)


def contact_sheet(stack: PeelStack) -> np.ndarray:
    """One row per layer: depth (gray), rgb, segmentation, normals."""
    L, H, W = stack.shape
    rows = []
    valid = stack.valid
    dmax = float(stack.depth[valid].max()) if valid.any() else 1.0
    dmin = float(stack.depth[valid].min()) if valid.any() else 0.0
    for l in range(L):
        d = np.zeros((H, W), np.uint8)
        v = valid[l]
        if v.any():
            d[v] = np.clip(255 - 200 * (stack.depth[l][v] - dmin) / max(dmax - dmin, 1e-9), 0, 255)
        depth = np.repeat(d[..., None], 3, axis=2)
        seg = _SEG_COLORS[stack.seg[l]]
        nrm = np.where(v[..., None], np.clip((stack.normal[l] * 0.5 + 0.5) * 255, 0, 255), 0)
        rows.append(np.concatenate([depth, stack.rgb[l], seg, nrm.astype(np.uint8)], axis=1))
    return np.concatenate(rows, axis=0)


def save_contact_sheet(stack: PeelStack, path) -> Path:
    pio.write_png(path, contact_sheet(stack))
    return Path(path)


def uv_wireframe(atlas: UVAtlas, background: Optional[np.ndarray] = None) -> np.ndarray:
    R = atlas.resolution
    base = np.full((R, R, 3), 255, np.uint8) if background is None else np.asarray(background)
    im = Image.fromarray(base.copy())
    draw = ImageDraw.Draw(im)
    for k, c in enumerate(atlas.charts):
        uv = atlas.atlas_uv(k)
        px = np.column_stack([uv[:, 0] * R - 0.5, (1 - uv[:, 1]) * R - 0.5])
        for f in c.partition.submesh.faces:
            pts = [tuple(px[i]) for i in f]
            draw.line(pts + [pts[0]], fill=(20, 20, 20), width=1)
        x, y, w, h = atlas.placements[k].rect
        draw.rectangle([x, R - y - h, x + w - 1, R - y - 1], outline=(220, 0, 0))
    return np.asarray(im)


def save_uv_wireframe(atlas: UVAtlas, path, background=None) -> Path:
    pio.write_png(path, uv_wireframe(atlas, background))
    return Path(path)


def distortion_heatmap(atlas: UVAtlas, vmax: float = 2.0) -> np.ndarray:
    """Charts filled per triangle by quasi-conformal ratio: green at 1, red at ``vmax`` and above."""
    R = atlas.resolution
    im = Image.new("RGB", (R, R), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    for k, c in enumerate(atlas.charts):
        uv = atlas.atlas_uv(k)
        px = np.column_stack([uv[:, 0] * R - 0.5, (1 - uv[:, 1]) * R - 0.5])
        t = np.clip((c.qc_ratio - 1.0) / (vmax - 1.0), 0, 1)
        for f, s in zip(c.partition.submesh.faces, t):
            draw.polygon([tuple(px[i]) for i in f], fill=(int(255 * s), int(200 * (1 - s)), 40))
    return np.asarray(im)


def save_distortion_heatmap(atlas: UVAtlas, path) -> Path:
    pio.write_png(path, distortion_heatmap(atlas))
    return Path(path)
