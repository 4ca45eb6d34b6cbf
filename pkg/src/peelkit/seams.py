"""Seams from peel layers: every vertex gets a layer, faces take the lowest one, and the
mesh splits into one partition per layer with seam vertices replicated."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import FILL, LayeredMesh, PeelError, TriMesh

MIN_PARTITION_FACES = 3


class AllVerticesFill(PeelError):
    pass


@dataclass
class Partition:
    submesh: TriMesh
    layer: int
    vertex_origin_map: np.ndarray  # submesh vertex -> original mesh vertex
    is_seam: np.ndarray
    face_origin_map: np.ndarray = None  # submesh face -> original mesh face


def assign_layers(mesh: LayeredMesh) -> np.ndarray:
    """Give FILL vertices the layer of their nearest non-FILL vertex (ties: lower layer)."""
    vl = mesh.vertex_layer.copy()
    tagged = np.flatnonzero(vl != FILL)
    if not len(tagged):
        raise AllVerticesFill("no vertex carries a peel layer")
    fill = np.flatnonzero(vl == FILL)
    if not len(fill):
        return vl
    pos = mesh.mesh.vertices
    tree = cKDTree(pos[tagged])
    k = min(8, len(tagged))
    d, idx = tree.query(pos[fill], k=k)
    d, idx = d.reshape(len(fill), k), idx.reshape(len(fill), k)
    layers = vl[tagged][idx]
    for row in range(len(fill)):
        dmin = d[row, 0]
        ties = d[row] <= dmin
        if ties.all() and k < len(tagged):
            # More equidistant candidates than queried: take every one at dmin.
            cand = tree.query_ball_point(pos[fill[row]], dmin * (1 + 1e-12) + 1e-300)
            vl[fill[row]] = vl[tagged][cand].min()
        else:
            vl[fill[row]] = layers[row][ties].min()
    return vl


def estimate_seams(mesh: TriMesh, vertex_layer) -> tuple:
    """Per-face layer (min of its vertex layers) and the seam vertices between layers.

    Returns ``(seams, face_layer)``; ``seams`` is a sorted array of vertices
    touching faces of two or more distinct layers.
    """
    vl = np.asarray(vertex_layer, dtype=np.int64)
    if len(vl) != mesh.n_vertices:
        raise ValueError("vertex_layer must cover every vertex")
    face_layer = vl[mesh.faces].min(axis=1)
    return _seams_from_face_layers(mesh, face_layer), face_layer


def _seams_from_face_layers(mesh: TriMesh, face_layer) -> np.ndarray:
    n = mesh.n_vertices
    lo = np.full(n, np.iinfo(np.int64).max)
    hi = np.full(n, np.iinfo(np.int64).min)
    fl = np.repeat(face_layer, 3)
    v = mesh.faces.ravel()
    np.minimum.at(lo, v, fl)
    np.maximum.at(hi, v, fl)
    return np.flatnonzero((lo != hi) & (hi >= lo))


def _merge_small(mesh: TriMesh, face_layer: np.ndarray) -> np.ndarray:
    """Relabel partitions with fewer than MIN_PARTITION_FACES faces into the neighbor
    sharing the most edges with them."""
    face_layer = face_layer.copy()
    while True:
        layers, counts = np.unique(face_layer, return_counts=True)
        small = [l for l, c in zip(layers, counts) if c < MIN_PARTITION_FACES]
        if not small or len(layers) == 1:
            return face_layer
        edge_faces = defaultdict(list)
        for fi, f in enumerate(mesh.faces):
            for k in range(3):
                a, b = int(f[k]), int(f[(k + 1) % 3])
                edge_faces[(min(a, b), max(a, b))].append(fi)
        changed = False
        for l in small:
            shared = defaultdict(int)
            for lst in edge_faces.values():
                ls = {int(face_layer[f]) for f in lst}
                if l in ls:
                    for other in ls - {l}:
                        shared[other] += 1
            if shared:
                target = max(sorted(shared), key=lambda o: shared[o])
                face_layer[face_layer == l] = target
                changed = True
        if not changed:
            return face_layer


def split_partitions(mesh: TriMesh, face_layer, seams=None) -> List[Partition]:
    """One Partition per occupied face layer, seam vertices copied into each user.

    Seam flags are recomputed from ``face_layer``, so ``seams`` is accepted
    only for interface symmetry with :func:`estimate_seams`.
    """
    face_layer = np.asarray(face_layer, dtype=np.int64)
    seam_set = _seams_from_face_layers(mesh, face_layer)
    seam_mask = np.zeros(mesh.n_vertices, bool)
    seam_mask[seam_set] = True
    parts = []
    for layer in np.unique(face_layer):
        fidx = np.flatnonzero(face_layer == layer)
        faces = mesh.faces[fidx]
        used = np.unique(faces)
        remap = np.full(mesh.n_vertices, -1, np.int64)
        remap[used] = np.arange(len(used))
        sub = TriMesh(
            mesh.vertices[used], remap[faces],
            normals=None if mesh.normals is None else mesh.normals[used],
            face_labels=None if mesh.face_labels is None else mesh.face_labels[fidx],
        )
        parts.append(Partition(sub, int(layer), used, seam_mask[used], fidx))
    _check_cover(mesh, parts)
    return parts


def _check_cover(mesh: TriMesh, parts: Sequence[Partition]) -> None:
    nf = sum(p.submesh.n_faces for p in parts)
    assert nf == mesh.n_faces, "partitions must cover every face exactly once"
    seen = np.zeros(mesh.n_vertices, np.int64)
    for p in parts:
        seen[p.vertex_origin_map] += 1
        f = p.vertex_origin_map[p.submesh.faces]
        assert np.all((f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2]))
    used = np.zeros(mesh.n_vertices, bool)
    used[mesh.faces.ravel()] = True
    assert np.all(seen[used] >= 1), "every used vertex must appear in a partition"


def partition_mesh(mesh: LayeredMesh) -> List[Partition]:
    """assign_layers, estimate_seams and split_partitions in one call.

    Layers with fewer than MIN_PARTITION_FACES faces are folded into the
    neighboring layer they share the most edges with before splitting.
    """
    vl = assign_layers(mesh)
    _, face_layer = estimate_seams(mesh.mesh, vl)
    face_layer = _merge_small(mesh.mesh, face_layer)
    return split_partitions(mesh.mesh, face_layer)
