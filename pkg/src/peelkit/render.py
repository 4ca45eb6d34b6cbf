"""Ground-truth peel stacks by multi-hit ray casting through every pixel center.

Every ray keeps going after its first hit, so each pixel records the sorted
list of all surface crossings.  Triangles are culled per pixel with their
projected bounding boxes; the surviving (triangle, ray) pairs get an exact
Moller-Trumbore test.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .core import PeelError, PeelStack, PinholeCamera, TriMesh, DEFAULT_LAYERS

DEFAULT_COLOR = (200, 200, 200)
BARY_EPS = 1e-9  # inclusive barycentric slack; keeps shared edges watertight
CHUNK = 1 << 19


class EmptyScene(PeelError):
    pass


@dataclass
class Scene:
    meshes: List[TriMesh]
    camera: PinholeCamera

    def __post_init__(self):
        for m in self.meshes:
            if m.face_labels is None or (m.n_faces and m.face_labels.min() <= 0):
                raise ValueError("every scene face needs a label > 0")

    @property
    def diameter(self) -> float:
        if not self.meshes:
            return 0.0
        v = np.concatenate([m.vertices for m in self.meshes])
        return float(np.linalg.norm(v.max(0) - v.min(0)))


@dataclass
class Hits:
    """Sorted, deduplicated ray hits; ``ray`` is non-decreasing, ``z`` ascending per ray."""

    ray: np.ndarray
    z: np.ndarray
    face: np.ndarray
    bary: np.ndarray  # (n, 2) barycentric (u, v) w.r.t. vertices 1 and 2
    rank: np.ndarray  # 0-based hit order along the ray


def _candidate_pairs(tri_px, tri_ok, cell_lo, cell_hi, origin, shape):
    """Enumerate (triangle, cell) pairs for every cell inside each triangle's pixel bbox."""
    W, H = shape
    lo = np.floor(tri_px.min(axis=1) + 0.5).astype(np.int64) - 1
    hi = np.floor(tri_px.max(axis=1) + 0.5).astype(np.int64) + 1
    # Triangles crossing the near plane get the whole sample extent.
    lo[~tri_ok] = cell_lo
    hi[~tri_ok] = cell_hi
    lo = np.maximum(lo, cell_lo)
    hi = np.minimum(hi, cell_hi)
    nx = np.maximum(hi[:, 0] - lo[:, 0] + 1, 0)
    ny = np.maximum(hi[:, 1] - lo[:, 1] + 1, 0)
    count = nx * ny
    tri = np.repeat(np.arange(len(count)), count)
    start = np.cumsum(count) - count
    k = np.arange(count.sum()) - np.repeat(start, count)
    nxr = np.repeat(nx, count)
    cx = lo[tri, 0] + k % nxr
    cy = lo[tri, 1] + k // nxr
    return tri, (cy - origin[1]) * W + (cx - origin[0])


def _moller_trumbore(v0, e1, e2, d):
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = -v0  # rays start at the camera center
    u = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    v = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (u >= -BARY_EPS) & (v >= -BARY_EPS) & (u + v <= 1.0 + BARY_EPS)
    return ok, t, u, v


def cast_rays(mesh: TriMesh, camera: PinholeCamera, pixels, eps_hit: float,
              threads: int = 1) -> Hits:
    """All hits of the rays through continuous pixel positions ``pixels`` (N, 2).

    Ray directions have unit z in camera space, so the ray parameter equals
    camera-space depth.  Hits closer than ``eps_hit`` along a ray merge into
    the first one; hits in front of ``znear`` are dropped.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n_rays = len(pixels)
    empty = Hits(np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64),
                 np.zeros((0, 2)), np.zeros(0, np.int64))
    if n_rays == 0 or mesh.n_faces == 0:
        return empty
    vc = camera.to_camera(mesh.vertices)
    tri = vc[mesh.faces]
    z = tri[:, :, 2]
    front = z.max(axis=1) >= camera.znear
    safe_z = np.where(z > 0, z, 1.0)
    tri_px = np.stack([camera.fx * tri[:, :, 0] / safe_z + camera.cx,
                       camera.fy * tri[:, :, 1] / safe_z + camera.cy], axis=-1)
    tri_ok = z.min(axis=1) >= camera.znear
    keep = np.flatnonzero(front)
    tri, tri_px, tri_ok = tri[keep], tri_px[keep], tri_ok[keep]

    cells = np.floor(pixels + 0.5).astype(np.int64)
    cell_lo, cell_hi = cells.min(axis=0), cells.max(axis=0)
    Wc, Hc = cell_hi - cell_lo + 1
    cell_id = (cells[:, 1] - cell_lo[1]) * Wc + (cells[:, 0] - cell_lo[0])
    order = np.argsort(cell_id, kind="stable")
    ptr = np.searchsorted(cell_id[order], np.arange(Wc * Hc + 1))

    t_idx, c_idx = _candidate_pairs(tri_px, tri_ok, cell_lo, cell_hi, cell_lo, (Wc, Hc))
    per = ptr[c_idx + 1] - ptr[c_idx]
    t_idx = np.repeat(t_idx, per)
    first = np.repeat(ptr[c_idx], per)
    k = np.arange(per.sum()) - np.repeat(np.cumsum(per) - per, per)
    r_idx = order[first + k]

    dirs = np.column_stack([(pixels[:, 0] - camera.cx) / camera.fx,
                            (pixels[:, 1] - camera.cy) / camera.fy, np.ones(n_rays)])
    v0, e1, e2 = tri[:, 0], tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]

    def work(sl):
        ti, ri = t_idx[sl], r_idx[sl]
        ok, t, u, v = _moller_trumbore(v0[ti], e1[ti], e2[ti], dirs[ri])
        ok &= t >= camera.znear
        return ri[ok], t[ok], ti[ok], u[ok], v[ok]

    slices = [slice(s, s + CHUNK) for s in range(0, len(t_idx), CHUNK)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(work, slices))
    else:
        parts = [work(s) for s in slices]
    if not parts:
        return empty
    ray, t, face, u, v = (np.concatenate(p) for p in zip(*parts))
    face = keep[face]
    # Sort by (ray, depth, face) so ties resolve identically for any chunking.
    o = np.lexsort((face, t, ray))
    ray, t, face, u, v = ray[o], t[o], face[o], u[o], v[o]
    dup = np.zeros(len(ray), bool)
    dup[1:] = (ray[1:] == ray[:-1]) & (t[1:] - t[:-1] < eps_hit)
    ray, t, face, u, v = ray[~dup], t[~dup], face[~dup], u[~dup], v[~dup]
    starts = np.ones(len(ray), bool)
    starts[1:] = ray[1:] != ray[:-1]
    idx = np.arange(len(ray))
    rank = idx - np.maximum.accumulate(np.where(starts, idx, 0))
    return Hits(ray, t, face, np.column_stack([u, v]), rank)


def sample_texture(texture: np.ndarray, uv: np.ndarray, filter: str = "nearest") -> np.ndarray:
    """Sample an (h, w, 3) uint8 texture at uv in [0, 1]^2 (v up, wrapping)."""
    h, w = texture.shape[:2]
    uv = np.asarray(uv, dtype=np.float64)
    x = uv[:, 0] * w - 0.5
    y = (1.0 - uv[:, 1]) * h - 0.5
    if filter == "nearest":
        xi = np.floor(x + 0.5).astype(np.int64) % w
        yi = np.floor(y + 0.5).astype(np.int64) % h
        return texture[yi, xi]
    if filter != "bilinear":
        raise ValueError(f"unknown texture filter {filter!r}")
    x0, y0 = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    t = texture.astype(np.float64)
    c = (t[y0 % h, x0 % w] * (1 - fx) * (1 - fy) + t[y0 % h, (x0 + 1) % w] * fx * (1 - fy)
         + t[(y0 + 1) % h, x0 % w] * (1 - fx) * fy + t[(y0 + 1) % h, (x0 + 1) % w] * fx * fy)
    return np.clip(np.rint(c), 0, 255).astype(np.uint8)


class _SceneArrays:
    """The scene flattened into one triangle soup with per-face provenance."""

    def __init__(self, scene: Scene):
        self.mesh_of_face = np.concatenate(
            [np.full(m.n_faces, i, np.int64) for i, m in enumerate(scene.meshes)])
        self.local_face = np.concatenate([np.arange(m.n_faces) for m in scene.meshes])
        off = np.cumsum([0] + [m.n_vertices for m in scene.meshes])
        self.mesh = TriMesh(
            np.concatenate([m.vertices for m in scene.meshes]),
            np.concatenate([m.faces + off[i] for i, m in enumerate(scene.meshes)]),
        )
        self.normals = None
        if all(m.normals is not None for m in scene.meshes):
            self.normals = np.concatenate([m.normals for m in scene.meshes])
        self.labels = np.concatenate([m.face_labels for m in scene.meshes])
        self.meshes = scene.meshes


def shade_hits(scene_arrays: _SceneArrays, hits: Hits, texture_filter: str = "nearest"):
    """Label and color per hit: texture at barycentric uv, else face color, else gray."""
    sa = scene_arrays
    n = len(hits.face)
    rgb = np.tile(np.array(DEFAULT_COLOR, np.uint8), (n, 1))
    u, v = hits.bary[:, 0:1], hits.bary[:, 1:2]
    for i, m in enumerate(sa.meshes):
        sel = np.flatnonzero(sa.mesh_of_face[hits.face] == i)
        if not len(sel):
            continue
        lf = sa.local_face[hits.face[sel]]
        cuv = m.corner_uv()
        if m.texture is not None and cuv is not None:
            c = cuv[lf]
            uv = (1 - u[sel] - v[sel]) * c[:, 0] + u[sel] * c[:, 1] + v[sel] * c[:, 2]
            rgb[sel] = sample_texture(m.texture, uv, texture_filter)
        elif m.face_colors is not None:
            rgb[sel] = m.face_colors[lf]
    return sa.labels[hits.face], rgb


def peel_render(scene: Scene, layers: int = DEFAULT_LAYERS, *, threads: int = 1,
                normal_source: str = "face", texture_filter: str = "nearest",
                eps_hit: Optional[float] = None) -> PeelStack:
    """Render a PeelStack holding the first ``layers`` surface crossings per pixel."""
    if layers < 1:
        raise ValueError("layers must be >= 1")
    if not scene.meshes or sum(m.n_faces for m in scene.meshes) == 0:
        raise EmptyScene("scene has no faces")
    cam = scene.camera
    W, H = cam.width, cam.height
    if eps_hit is None:
        eps_hit = 1e-6 * scene.diameter
    sa = _SceneArrays(scene)
    ys, xs = np.mgrid[0:H, 0:W]
    pixels = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
    hits = cast_rays(sa.mesh, cam, pixels, eps_hit, threads)
    keep = hits.rank < layers
    hits = Hits(hits.ray[keep], hits.z[keep], hits.face[keep], hits.bary[keep], hits.rank[keep])

    labels, rgb = shade_hits(sa, hits, texture_filter)
    dirs = np.column_stack([(pixels[hits.ray, 0] - cam.cx) / cam.fx,
                            (pixels[hits.ray, 1] - cam.cy) / cam.fy, np.ones(len(hits.ray))])
    if normal_source == "vertex" and sa.normals is not None:
        f = sa.mesh.faces[hits.face]
        u, v = hits.bary[:, 0:1], hits.bary[:, 1:2]
        nw = (1 - u - v) * sa.normals[f[:, 0]] + u * sa.normals[f[:, 1]] + v * sa.normals[f[:, 2]]
        n = nw @ cam.rotation.T
    elif normal_source in ("face", "vertex"):
        n = sa.mesh.face_normals()[hits.face] @ cam.rotation.T
    else:
        raise ValueError(f"unknown normal source {normal_source!r}")
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.einsum("ij,ij->i", n, dirs) > 0
    n[flip] *= -1

    depth = np.zeros((layers, H * W), np.float32)
    seg = np.zeros((layers, H * W), np.uint8)
    col = np.zeros((layers, H * W, 3), np.uint8)
    nrm = np.zeros((layers, H * W, 3), np.float32)
    depth[hits.rank, hits.ray] = hits.z
    seg[hits.rank, hits.ray] = labels
    col[hits.rank, hits.ray] = rgb
    nrm[hits.rank, hits.ray] = n
    # float32 rounding can merge two very close hits; drop the later ones.
    d = depth.reshape(layers, H * W)
    for l in range(1, layers):
        bad = (d[l] > 0) & (d[l] <= d[l - 1])
        if bad.any():
            for arr in (depth, seg, col, nrm):
                arr[l:, bad] = np.roll(arr[l:, bad], -1, axis=0)
                arr[-1, bad] = 0
    return PeelStack(cam, depth.reshape(layers, H, W), col.reshape(layers, H, W, 3),
                     seg.reshape(layers, H, W), nrm.reshape(layers, H, W, 3))


def render_normal_map(scene: Scene, **kwargs) -> np.ndarray:
    """First-layer camera-space normal image (H, W, 3)."""
    return peel_render(scene, 1, **kwargs).normal[0]
