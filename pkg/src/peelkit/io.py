"""File formats: PFM/PNG peel layers with a JSON manifest, OBJ meshes, ASCII PLY clouds."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .core import LabeledPointCloud, PeelStack, PinholeCamera, TriMesh

STACK_SCHEMA = "peelstack/1"
STACK_MANIFEST = "stack.json"


def write_pfm(path, image: np.ndarray) -> None:
    """Write a little-endian PFM (grayscale for 2-D input, color for (H, W, 3))."""
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        tag = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"cannot store shape {image.shape} as PFM")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        # PFM scanlines run bottom to top.
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline().strip())
        data = f.read()
    dtype = "<f4" if scale < 0 else ">f4"
    channels = 3 if tag == b"PF" else 1
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].astype(np.float32)


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def read_png(path, mode=None) -> np.ndarray:
    with Image.open(path) as im:
        if mode is not None:
            im = im.convert(mode)
        return np.array(im)


def save_stack(stack: PeelStack, directory) -> Path:
    """Write one file per channel and layer plus ``stack.json``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    channels = {"depth": [], "normal": [], "rgb": [], "seg": []}
    for l in range(stack.layers):
        names = {
            "depth": f"depth_{l + 1}.pfm",
            "normal": f"normal_{l + 1}.pfm",
            "rgb": f"rgb_{l + 1}.png",
            "seg": f"seg_{l + 1}.png",
        }
        write_pfm(d / names["depth"], stack.depth[l])
        write_pfm(d / names["normal"], stack.normal[l])
        write_png(d / names["rgb"], stack.rgb[l])
        write_png(d / names["seg"], stack.seg[l])
        for k, v in names.items():
            channels[k].append(v)
    manifest = {
        "schema": STACK_SCHEMA,
        "camera": stack.camera.to_dict(),
        "layers": stack.layers,
        "channels": channels,
    }
    path = d / STACK_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_stack(path) -> PeelStack:
    """Load a stack from its manifest file (or the directory holding ``stack.json``)."""
    p = Path(path)
    if p.is_dir():
        p = p / STACK_MANIFEST
    manifest = json.loads(p.read_text())
    if manifest.get("schema") != STACK_SCHEMA:
        raise ValueError(f"{p}: unsupported schema {manifest.get('schema')!r}")
    base = p.parent
    ch = manifest["channels"]
    depth = np.stack([read_pfm(base / f) for f in ch["depth"]])
    normal = np.stack([read_pfm(base / f) for f in ch["normal"]])
    rgb = np.stack([read_png(base / f, "RGB") for f in ch["rgb"]])
    seg = np.stack([read_png(base / f, "L") for f in ch["seg"]])
    if len(depth) != manifest["layers"]:
        raise ValueError(f"{p}: layer count mismatch")
    return PeelStack(PinholeCamera.from_dict(manifest["camera"]), depth, rgb, seg, normal)


def _fmt(x) -> str:
    return repr(float(x))


def save_obj(mesh: TriMesh, path, texture_path=None, material="atlas") -> None:
    """Write an OBJ. With ``texture_path`` an MTL is written next to it referencing the image.

    Per-face labels go into ``usemtl label_<id>`` groups when no texture is given,
    so labels survive a round trip.
    """
    path = Path(path)
    lines = []
    if texture_path is not None:
        mtl = path.with_suffix(".mtl")
        rel = os.path.relpath(texture_path, path.parent)
        mtl.write_text(f"newmtl {material}\nKa 1 1 1\nKd 1 1 1\nmap_Kd {rel}\n")
        lines.append(f"mtllib {mtl.name}")
    for v in mesh.vertices:
        lines.append("v " + " ".join(_fmt(c) for c in v))
    if mesh.normals is not None:
        for n in mesh.normals:
            lines.append("vn " + " ".join(_fmt(c) for c in n))
    if mesh.uv is not None:
        for t in mesh.uv:
            lines.append("vt " + " ".join(_fmt(c) for c in t))
    fuv = None
    if mesh.uv is not None:
        fuv = mesh.faces if mesh.face_uv is None else mesh.face_uv
    current = None
    if texture_path is not None:
        lines.append(f"usemtl {material}")
    for i, f in enumerate(mesh.faces):
        if texture_path is None and mesh.face_labels is not None:
            lab = int(mesh.face_labels[i])
            if lab != current:
                lines.append(f"usemtl label_{lab}")
                current = lab
        corners = []
        for k in range(3):
            vi = f[k] + 1
            ti = "" if fuv is None else str(fuv[i, k] + 1)
            if mesh.normals is not None:
                corners.append(f"{vi}/{ti}/{vi}")
            elif ti:
                corners.append(f"{vi}/{ti}")
            else:
                corners.append(str(vi))
        lines.append("f " + " ".join(corners))
    path.write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriMesh:
    """Read an OBJ with triangles (polygons are fan-triangulated).

    ``usemtl label_<id>`` groups become face labels; an ``map_Kd`` in the
    referenced MTL is loaded as the texture.
    """
    path = Path(path)
    verts, normals, uvs = [], [], []
    faces, fuv, labels = [], [], []
    label = 0
    texture = None
    for raw in path.read_text().splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        key = parts[0]
        if key == "v":
            verts.append([float(t) for t in parts[1:4]])
        elif key == "vn":
            normals.append([float(t) for t in parts[1:4]])
        elif key == "vt":
            uvs.append([float(t) for t in parts[1:3]])
        elif key == "usemtl":
            name = parts[1]
            label = int(name[6:]) if name.startswith("label_") else 0
        elif key == "mtllib":
            mtl = path.parent / parts[1]
            if mtl.exists():
                for line in mtl.read_text().splitlines():
                    tok = line.split()
                    if tok and tok[0] == "map_Kd":
                        texture = read_png(mtl.parent / tok[1], "RGB")
        elif key == "f":
            idx = [c.split("/") for c in parts[1:]]
            vi = [int(c[0]) - 1 for c in idx]
            ti = [int(c[1]) - 1 if len(c) > 1 and c[1] else -1 for c in idx]
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                fuv.append([ti[0], ti[k], ti[k + 1]])
                labels.append(label)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    fuv = np.array(fuv, dtype=np.int64).reshape(-1, 3)
    uv = np.array(uvs, dtype=np.float64).reshape(-1, 2) if uvs and (fuv >= 0).all() else None
    n = None
    if normals and len(normals) == len(verts):
        n = np.array(normals, dtype=np.float64)
    return TriMesh(
        np.array(verts, dtype=np.float64).reshape(-1, 3), faces, normals=n,
        face_labels=np.array(labels, dtype=np.int64) if any(labels) else None,
        uv=uv, face_uv=fuv if uv is not None else None, texture=texture,
    )


def save_ply(cloud: LabeledPointCloud, path) -> None:
    """ASCII PLY with one ``x y z nx ny nz label layer`` row per point."""
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(cloud)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar label", "property uchar layer", "end_header",
    ]
    rows = [
        " ".join(_fmt(c) for c in p) + " " + " ".join(_fmt(c) for c in n) + f" {lab} {lay}"
        for p, n, lab, lay in zip(cloud.points, cloud.normals, cloud.labels, cloud.layer_ids)
    ]
    Path(path).write_text("\n".join(header + rows) + "\n")


def load_ply(path) -> LabeledPointCloud:
    lines = Path(path).read_text().splitlines()
    end = lines.index("end_header")
    data = np.array([[float(t) for t in ln.split()] for ln in lines[end + 1:] if ln.strip()])
    data = data.reshape(-1, 8)
    n = len(data)
    return LabeledPointCloud(data[:, :3], data[:, 3:6], data[:, 6].astype(np.int64),
                             data[:, 7].astype(np.int64), -np.ones((n, 3), np.int64))
