"""Least-squares conformal flattening of partitions and shelf packing into one atlas."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import pdist, squareform

from .core import PeelError, TriMesh
from .seams import Partition
from .topology import (boundary_loops, cut_mesh, disk_cut_edges, face_components, is_disk)

CG_RTOL = 1e-10


class NonDiskTopology(PeelError):
    pass


class FlippedTriangles(PeelError):
    def __init__(self, count):
        self.count = int(count)
        super().__init__(f"{self.count} flipped UV triangle(s)")


class SolverSingular(PeelError):
    pass


class CannotFit(PeelError):
    pass


@dataclass
class UVChart:
    partition: Partition
    uv: np.ndarray
    qc_ratio: np.ndarray  # per triangle, sigma_max / sigma_min of the 3D -> uv map
    area_scale: np.ndarray  # per triangle, uv area / 3D area
    angle_error: np.ndarray  # per triangle, max |3D angle - uv angle| in radians
    residual: float  # relative residual of the normal equations
    iterations: int
    pins: tuple

    @property
    def layer(self) -> int:
        return self.partition.layer

    @property
    def flipped(self) -> int:
        return int(np.count_nonzero(signed_areas(self.uv, self.partition.submesh.faces) <= 0))


def signed_areas(uv, faces) -> np.ndarray:
    t = np.asarray(uv)[faces]
    e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def local_frames(vertices, faces):
    """Each triangle in its own orthonormal 2D frame: (F, 3, 2), counter-clockwise."""
    t = vertices[faces]
    e1 = t[:, 1] - t[:, 0]
    e2 = t[:, 2] - t[:, 0]
    x = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    y = np.cross(n, x)
    out = np.zeros((len(faces), 3, 2))
    out[:, 1, 0] = np.einsum("ij,ij->i", e1, x)
    out[:, 2, 0] = np.einsum("ij,ij->i", e2, x)
    out[:, 2, 1] = np.einsum("ij,ij->i", e2, y)
    return out


def _gradients(p2):
    """Gradients of the three barycentric basis functions per triangle: (F, 3, 2), and area."""
    area = 0.5 * ((p2[:, 1, 0] - p2[:, 0, 0]) * (p2[:, 2, 1] - p2[:, 0, 1])
                  - (p2[:, 1, 1] - p2[:, 0, 1]) * (p2[:, 2, 0] - p2[:, 0, 0]))
    g = np.empty_like(p2)
    for j in range(3):
        e = p2[:, (j + 2) % 3] - p2[:, (j + 1) % 3]
        g[:, j, 0] = -e[:, 1]
        g[:, j, 1] = e[:, 0]
    return g / (2.0 * area)[:, None, None], area


def conformal_matrix(vertices, faces) -> sp.csr_matrix:
    """Rows r1 = du/dx - dv/dy, r2 = du/dy + dv/dx per triangle, scaled by sqrt(area).

    Unknowns are ordered [u_0..u_{n-1}, v_0..v_{n-1}].  The squared norm of
    ``A @ x`` is the discrete conformal energy; it vanishes exactly on
    orientation-preserving similarities.
    """
    n = len(vertices)
    nf = len(faces)
    g, area = _gradients(local_frames(vertices, faces))
    w = np.sqrt(area)[:, None]
    gx, gy = g[:, :, 0] * w, g[:, :, 1] * w
    r1 = np.repeat(2 * np.arange(nf), 3)
    r2 = r1 + 1
    cu = faces.ravel()
    cv = cu + n
    rows = np.concatenate([r1, r1, r2, r2])
    cols = np.concatenate([cu, cv, cu, cv])
    vals = np.concatenate([gx.ravel(), -gy.ravel(), gy.ravel(), gx.ravel()])
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * nf, 2 * n))


def conjugate_gradient(A, b, rtol=CG_RTOL, maxiter=None):
    """Jacobi-preconditioned CG for symmetric positive definite ``A``.

    Returns ``(x, relative_residual, iterations)``; the residual is
    ``|b - A x| / |b|`` recomputed from scratch at exit.
    """
    n = len(b)
    if maxiter is None:
        maxiter = max(1000, 20 * n)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0.0, 0
    d = A.diagonal()
    if np.any(d <= 0):
        raise SolverSingular("matrix has a non-positive diagonal entry")
    minv = 1.0 / d
    x = np.zeros(n)
    r = b.copy()
    z = minv * r
    p = z.copy()
    rz = r @ z
    it = 0
    while it < maxiter:
        if np.linalg.norm(r) <= rtol * bnorm * 0.5:
            break
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0:
            raise SolverSingular("matrix is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - A @ x  # refresh against drift
        z = minv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    if res > rtol:
        raise SolverSingular(f"CG stalled at relative residual {res:.3e} after {it} iterations")
    return x, res, it


def pick_pins(vertices, faces):
    """Farthest pair of boundary vertices (ties: lowest indices)."""
    loops = boundary_loops(faces)
    if not loops:
        raise NonDiskTopology("partition has no boundary")
    b = np.unique(np.concatenate(loops))
    if len(b) < 2:
        raise NonDiskTopology("boundary too small to pin")
    D = squareform(pdist(vertices[b]))
    flat = np.flatnonzero(D == D.max())
    i, j = np.unravel_index(flat[0], D.shape)
    a, c = sorted((int(b[i]), int(b[j])))
    return a, c


def triangle_angles(points, faces) -> np.ndarray:
    t = points[faces]
    out = np.empty((len(faces), 3))
    for k in range(3):
        u = t[:, (k + 1) % 3] - t[:, k]
        v = t[:, (k + 2) % 3] - t[:, k]
        cosv = np.einsum("ij,ij->i", u, v) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
        out[:, k] = np.arccos(np.clip(cosv, -1.0, 1.0))
    return out


def distortion(vertices, faces, uv):
    """Per-triangle (qc_ratio, area_scale, angle_error) of the piecewise-linear map to uv."""
    g, area = _gradients(local_frames(vertices, faces))
    t = uv[faces]
    # Jacobian rows: gradient of u and of v.
    Ju = np.einsum("fj,fjk->fk", t[:, :, 0], g)
    Jv = np.einsum("fj,fjk->fk", t[:, :, 1], g)
    J = np.stack([Ju, Jv], axis=1)
    s = np.linalg.svd(J, compute_uv=False)
    with np.errstate(divide="ignore"):
        qc = np.where(s[:, 1] > 0, s[:, 0] / s[:, 1], np.inf)
    det = np.linalg.det(J)
    uv3 = np.column_stack([uv, np.zeros(len(uv))])
    ang = np.abs(triangle_angles(vertices, faces) - triangle_angles(uv3, faces)).max(axis=1)
    return qc, det, ang


def conformal_flatten(partition: Partition, check_flips: bool = True) -> UVChart:
    """LSCM flattening with the farthest boundary pair pinned to (0, 0) and (1, 0)."""
    mesh = partition.submesh
    faces, verts = mesh.faces, mesh.vertices
    if mesh.n_faces == 0 or not is_disk(faces):
        raise NonDiskTopology("conformal_flatten needs a connected disk-topology partition")
    if np.any(mesh.face_areas() <= 1e-14 * mesh.diameter() ** 2):
        raise SolverSingular("partition has a zero-area triangle")
    n = mesh.n_vertices
    p0, p1 = pick_pins(verts, faces)
    A = conformal_matrix(verts, faces)
    pinned = np.array([p0, p1, p0 + n, p1 + n])
    pin_val = np.array([0.0, 1.0, 0.0, 0.0])
    free = np.setdiff1d(np.arange(2 * n), pinned)
    Af = A[:, free].tocsc()
    b = -(A[:, pinned] @ pin_val)
    N = (Af.T @ Af).tocsr()
    rhs = Af.T @ b
    x, res, it = conjugate_gradient(N, rhs)
    sol = np.zeros(2 * n)
    sol[free] = x
    sol[pinned] = pin_val
    uv = np.column_stack([sol[:n], sol[n:]])
    if not np.all(np.isfinite(uv)):
        raise SolverSingular("non-finite uv")
    qc, det, ang = distortion(verts, faces, uv)
    chart = UVChart(partition, uv, qc, det, ang, float(res), int(it), (p0, p1))
    if check_flips and chart.flipped:
        raise FlippedTriangles(chart.flipped)
    return chart


def make_disk_charts(partitions: Sequence[Partition]) -> List[Partition]:
    """Split partitions into connected pieces and cut non-disk pieces open.

    Cut vertices become seam vertices; ``vertex_origin_map`` keeps pointing at
    the original mesh vertices and ``face_origin_map`` at the original faces.
    """
    out = []
    for part in partitions:
        sub = part.submesh
        comp = face_components(sub.faces)
        for c in range(comp.max() + 1 if len(comp) else 0):
            fidx = np.flatnonzero(comp == c)
            faces = sub.faces[fidx]
            new_faces, origin = cut_mesh(faces)  # split bowtie vertices first
            if not is_disk(new_faces):
                cut = disk_cut_edges(new_faces)
                cf, o2 = cut_mesh(new_faces, cut)
                new_faces, origin = cf, origin[o2]
            counts = np.bincount(origin, minlength=sub.n_vertices)
            seam = part.is_seam[origin] | (counts[origin] > 1)
            mesh = TriMesh(sub.vertices[origin], new_faces,
                           normals=None if sub.normals is None else sub.normals[origin],
                           face_labels=None if sub.face_labels is None else sub.face_labels[fidx])
            fo = None if part.face_origin_map is None else part.face_origin_map[fidx]
            out.append(Partition(mesh, part.layer, part.vertex_origin_map[origin], seam, fo))
    return out


def _sub_partition(part: Partition, fidx, extra_seam) -> Partition:
    sub = part.submesh
    faces = sub.faces[fidx]
    used = np.unique(faces)
    remap = np.full(sub.n_vertices, -1, np.int64)
    remap[used] = np.arange(len(used))
    mesh = TriMesh(sub.vertices[used], remap[faces],
                   normals=None if sub.normals is None else sub.normals[used],
                   face_labels=None if sub.face_labels is None else sub.face_labels[fidx])
    fo = None if part.face_origin_map is None else part.face_origin_map[fidx]
    return Partition(mesh, part.layer, part.vertex_origin_map[used],
                     part.is_seam[used] | extra_seam[used], fo)


def split_in_half(part: Partition) -> List[Partition]:
    """Cut a chart in two across the principal axis of its face centroids."""
    sub = part.submesh
    cen = sub.vertices[sub.faces].mean(axis=1)
    c = cen - cen.mean(axis=0)
    axis = np.linalg.svd(c, full_matrices=False)[2][0]
    t = c @ axis
    order = np.lexsort((np.arange(len(t)), t))
    side = np.zeros(len(t), bool)
    side[order[len(t) // 2:]] = True
    a, b = np.flatnonzero(~side), np.flatnonzero(side)
    shared = np.zeros(sub.n_vertices, bool)
    shared[np.intersect1d(sub.faces[a], sub.faces[b])] = True
    return [_sub_partition(part, a, shared), _sub_partition(part, b, shared)]


def flatten_partitions(partitions: Sequence[Partition], split_on_flip: bool = True) -> List[UVChart]:
    """Disk-cut every partition and flatten it.

    With ``split_on_flip`` a chart that comes back with flipped triangles is
    halved and each half flattened again, recursively; single triangles never
    flip, so every returned chart is flip-free.
    """
    out = []
    queue = list(make_disk_charts(partitions))
    while queue:
        part = queue.pop(0)
        try:
            out.append(conformal_flatten(part))
        except FlippedTriangles:
            if not split_on_flip or part.submesh.n_faces < 2:
                raise
            queue[:0] = make_disk_charts(split_in_half(part))
    return out


# --- atlas packing ----------------------------------------------------------

@dataclass
class Placement:
    scale: float  # chart-local uv -> atlas uv
    translation: np.ndarray  # atlas uv offset
    bbox: np.ndarray  # [umin, vmin, umax, vmax] of the chart in atlas uv (no gutter)
    rect: tuple  # texel rectangle (x, y, w, h) including gutter, y counted from the bottom


@dataclass
class UVAtlas:
    charts: List[UVChart]
    placements: List[Placement]
    resolution: int
    gutter: int
    texels_per_meter: float = 0.0

    def atlas_uv(self, k: int) -> np.ndarray:
        p = self.placements[k]
        return self.charts[k].uv * p.scale + p.translation

    def utilization(self) -> float:
        """Fraction of [0, 1]^2 covered by chart bounding boxes."""
        return float(sum((p.bbox[2] - p.bbox[0]) * (p.bbox[3] - p.bbox[1]) for p in self.placements))

    def uv_area_fraction(self) -> float:
        return float(sum(np.abs(signed_areas(self.atlas_uv(k), c.partition.submesh.faces)).sum()
                         for k, c in enumerate(self.charts)))

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "gutter": self.gutter,
            "texels_per_meter": self.texels_per_meter,
            "charts": [
                {"layer": c.layer, "scale": p.scale, "translation": p.translation.tolist(),
                 "bbox": p.bbox.tolist(), "rect": list(p.rect)}
                for c, p in zip(self.charts, self.placements)
            ],
        }


def _metric_boxes(charts):
    """Chart-local uv rescaled so uv area equals 3D area; returns (scale, min, size)."""
    out = []
    for c in charts:
        m = c.partition.submesh
        a3 = m.face_areas().sum()
        auv = np.abs(signed_areas(c.uv, m.faces)).sum()
        s = math.sqrt(a3 / auv) if auv > 0 else 1.0
        lo = c.uv.min(axis=0) * s
        hi = c.uv.max(axis=0) * s
        out.append((s, lo, hi - lo))
    return out


def _shelf(sizes, resolution, gutter, density):
    """Shelf-pack rectangles; returns texel rects or None if they do not fit."""
    rects = [None] * len(sizes)
    dims = [(int(math.ceil(w * density)) + 2 * gutter, int(math.ceil(h * density)) + 2 * gutter)
            for w, h in sizes]
    order = sorted(range(len(dims)), key=lambda k: (-dims[k][1], -dims[k][0], k))
    x = y = shelf_h = 0
    for k in order:
        w, h = dims[k]
        if w > resolution:
            return None
        if x + w > resolution:
            y += shelf_h
            x = shelf_h = 0
        if y + h > resolution:
            return None
        rects[k] = (x, y, w, h)
        x += w
        shelf_h = max(shelf_h, h)
    return rects


def pack_atlas(charts: Sequence[UVChart], resolution: int = 1024, gutter: int = 2) -> UVAtlas:
    """Pack charts on shelves sorted by descending height at one shared texel density.

    Each chart is first rescaled to metric size, then the largest density
    (texels per meter) that still fits every chart is found by bisection.
    """
    if resolution < 16 or gutter < 1:
        raise ValueError("resolution must be >= 16 and gutter >= 1")
    charts = list(charts)
    if not charts:
        return UVAtlas([], [], resolution, gutter)
    boxes = _metric_boxes(charts)
    sizes = [tuple(b[2]) for b in boxes]
    if _shelf(sizes, resolution, gutter, 0.0) is None:
        raise CannotFit("charts do not fit even at vanishing scale")
    big = max(max(w, h) for w, h in sizes)
    hi = (resolution - 2 * gutter) / big if big > 0 else 1.0
    lo = 0.0
    if _shelf(sizes, resolution, gutter, hi) is not None:
        lo = hi
    else:
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _shelf(sizes, resolution, gutter, mid) is not None:
                lo = mid
            else:
                hi = mid
    density = lo
    rects = _shelf(sizes, resolution, gutter, density)
    placements = []
    for c, (s, mn, size), r in zip(charts, boxes, rects):
        scale = s * density / resolution
        origin = np.array([r[0] + gutter, r[1] + gutter], float) / resolution
        trans = origin - mn * density / resolution
        bbox = np.concatenate([origin, origin + size * density / resolution])
        placements.append(Placement(scale, trans, bbox, r))
    atlas = UVAtlas(charts, placements, resolution, gutter, density)
    _check_disjoint(atlas)
    return atlas


def _check_disjoint(atlas: UVAtlas) -> None:
    R = atlas.resolution
    for i, p in enumerate(atlas.placements):
        x, y, w, h = p.rect
        assert 0 <= x and 0 <= y and x + w <= R and y + h <= R, "chart outside the atlas"
        for q in atlas.placements[i + 1:]:
            X, Y, Wq, Hq = q.rect
            assert x + w <= X or X + Wq <= x or y + h <= Y or Y + Hq <= y, "charts overlap"
