"""Geometry from peel stacks: back-projection, per-layer grid meshes, welding, gap stitching."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .core import (FILL, InvalidStack, LabeledPointCloud, LayeredMesh, PeelStack, TriMesh,
                   unproject, validate_stack)
from .topology import boundary_edges, boundary_loops, edge_counts


def backproject(stack: PeelStack) -> LabeledPointCloud:
    """One labeled world-space point per valid texel, layer-major then row-major."""
    violations = validate_stack(stack)
    if violations:
        raise InvalidStack(violations)
    cam = stack.camera
    l, y, x = np.nonzero(stack.valid)
    pts = unproject(cam, np.column_stack([x, y]).astype(np.float64),
                    stack.depth[l, y, x].astype(np.float64))
    nrm = stack.normal[l, y, x].astype(np.float64) @ cam.rotation
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return LabeledPointCloud(pts, nrm, stack.seg[l, y, x], l + 1, np.column_stack([l + 1, x, y]))


def extract_garment(pc: LabeledPointCloud, label: int) -> LabeledPointCloud:
    if label <= 0:
        raise ValueError("garment label must be > 0")
    return pc.subset(pc.labels == label)


MUTUAL_WINDOW = 8  # boundary vertices; see stitch_gaps
RUN_GAP = 4  # jagged-rim tolerance in stitch_gaps, in boundary vertices
DISC_SLOPE = 8.0  # depth step per pixel footprint still treated as one surface (~83 deg)


def default_tau_disc(stack: PeelStack, layer: int, label: Optional[int] = None) -> float:
    """3x the median depth step between 4-neighbor valid texels.

    Floored at ``DISC_SLOPE`` pixel footprints at the median depth: on curved
    surfaces the median step is small and the bare median rule would cut the
    surface well inside its silhouette.
    """
    d = stack.depth[layer - 1].astype(np.float64)
    ok = d > 0
    if label is not None:
        ok &= stack.seg[layer - 1] == label
    steps = []
    for a, b, va, vb in ((d[:, :-1], d[:, 1:], ok[:, :-1], ok[:, 1:]),
                         (d[:-1, :], d[1:, :], ok[:-1, :], ok[1:, :])):
        m = va & vb
        steps.append(np.abs(a - b)[m])
    steps = np.concatenate(steps)
    if not ok.any():
        return 0.0
    floor = DISC_SLOPE * float(stack.camera.footprint(np.median(d[ok])))
    if not len(steps):
        return floor
    return max(3.0 * float(np.median(steps)), floor)


def meshify_layer(stack: PeelStack, layer: int, label: int,
                  tau_disc: Optional[float] = None) -> LayeredMesh:
    """Triangulate the valid ``label`` texels of one layer on the image grid.

    Each 2x2 texel block with four valid corners is split along its shorter 3D
    diagonal (ties: top-left to bottom-right); three valid corners give one
    triangle.  Triangles with an edge whose depth step exceeds ``tau_disc``
    are dropped.  Odd layers face the camera and even layers face away, which
    orients a closed surface outward.
    """
    if not 1 <= layer <= stack.layers:
        raise ValueError(f"layer must be in [1, {stack.layers}]")
    if tau_disc is None:
        tau_disc = default_tau_disc(stack, layer, label)
    cam = stack.camera
    li = layer - 1
    depth = stack.depth[li].astype(np.float64)
    ok = (depth > 0) & (stack.seg[li] == label)
    H, W = depth.shape
    ys, xs = np.nonzero(ok)
    index = np.full((H, W), -1, np.int64)
    index[ys, xs] = np.arange(len(ys))
    verts = unproject(cam, np.column_stack([xs, ys]).astype(np.float64), depth[ys, xs]) \
        if len(ys) else np.zeros((0, 3))
    normals = None
    if len(ys):
        n = stack.normal[li, ys, xs].astype(np.float64) @ cam.rotation
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        normals = n if layer % 2 == 1 else -n

    a, b = index[:-1, :-1].ravel(), index[:-1, 1:].ravel()
    c, d = index[1:, :-1].ravel(), index[1:, 1:].ravel()
    tris = []
    full = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    if full.any():
        A, B, C, D = a[full], b[full], c[full], d[full]
        lad = np.linalg.norm(verts[A] - verts[D], axis=1)
        lbc = np.linalg.norm(verts[B] - verts[C], axis=1)
        use_ad = lad <= lbc
        tris.append(np.where(use_ad[:, None], np.column_stack([A, B, D]), np.column_stack([A, B, C])))
        tris.append(np.where(use_ad[:, None], np.column_stack([A, D, C]), np.column_stack([B, D, C])))
    three = ((a >= 0).astype(int) + (b >= 0) + (c >= 0) + (d >= 0)) == 3
    if three.any():
        quad = np.column_stack([a, b, d, c])[three]  # cyclic order around the block
        keep = quad >= 0
        tris.append(quad[keep].reshape(-1, 3))
    faces = np.concatenate(tris) if tris else np.zeros((0, 3), np.int64)
    if len(faces):
        z = depth[ys, xs]
        fz = z[faces]
        gap = np.abs(fz - np.roll(fz, -1, axis=1)).max(axis=1)
        faces = faces[gap <= tau_disc]
    if len(faces):
        # Orient: image-space signed area < 0 means the normal faces the camera.
        px = np.column_stack([xs, ys]).astype(np.float64)[faces]
        e1, e2 = px[:, 1] - px[:, 0], px[:, 2] - px[:, 0]
        cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        want_negative = layer % 2 == 1
        flip = (cross > 0) if want_negative else (cross < 0)
        faces[flip] = faces[flip][:, [0, 2, 1]]
    mesh = TriMesh(verts, faces, normals=normals, face_labels=np.full(len(faces), label))
    src = np.column_stack([np.full(len(ys), layer), xs, ys])
    return LayeredMesh(mesh, np.full(len(ys), layer), src)


def merge_layers(parts: Sequence[LayeredMesh], eps_weld: Optional[float] = None) -> LayeredMesh:
    """Concatenate partial meshes and weld vertices closer than ``eps_weld``.

    The lowest-index vertex of each welded cluster survives with its tags.
    Faces that collapse or duplicate an existing face are dropped.
    """
    parts = list(parts)
    if not parts:
        return LayeredMesh(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64)), np.zeros(0))
    verts = np.concatenate([p.mesh.vertices for p in parts])
    if eps_weld is None:
        eps_weld = 1e-5 * (float(np.linalg.norm(verts.max(0) - verts.min(0))) if len(verts) else 0.0)
    off = np.cumsum([0] + [p.mesh.n_vertices for p in parts])
    faces = np.concatenate([p.mesh.faces + off[i] for i, p in enumerate(parts)])
    labels = np.concatenate([
        p.mesh.face_labels if p.mesh.face_labels is not None else np.zeros(p.mesh.n_faces, np.int64)
        for p in parts])
    vlayer = np.concatenate([p.vertex_layer for p in parts])
    has_src = all(p.vertex_source is not None for p in parts)
    vsrc = np.concatenate([p.vertex_source for p in parts]) if has_src else None
    has_n = all(p.mesh.normals is not None for p in parts)
    normals = np.concatenate([p.mesh.normals for p in parts]) if has_n else None

    rep = np.arange(len(verts))
    if eps_weld > 0 and len(verts) > 1:
        pairs = cKDTree(verts).query_pairs(eps_weld, output_type="ndarray")
        if len(pairs):
            from scipy.sparse import coo_matrix
            from scipy.sparse.csgraph import connected_components
            g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                           shape=(len(verts), len(verts)))
            _, comp = connected_components(g, directed=False)
            first = np.full(comp.max() + 1, len(verts))
            np.minimum.at(first, comp, np.arange(len(verts)))
            rep = first[comp]
    survivors = np.unique(rep)
    remap = np.full(len(verts), -1, np.int64)
    remap[survivors] = np.arange(len(survivors))
    faces = remap[rep[faces]]
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces, labels = faces[ok], labels[ok]
    if len(faces):
        _, first = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
        first.sort()
        faces, labels = faces[first], labels[first]
    mesh = TriMesh(verts[survivors], faces,
                   normals=None if normals is None else normals[survivors], face_labels=labels)
    return LayeredMesh(mesh, vlayer[survivors], None if vsrc is None else vsrc[survivors])


def _zipper(P, Q, pos, closed):
    """Triangle strip between polylines P and Q (vertex index lists).

    The side that lags in normalized arc length advances next; among equal
    progress the shorter new diagonal wins.  Arc-length sync keeps the strip
    from fanning out when rims are staircase-shaped.
    """
    if closed:
        P = list(P) + [P[0]]
        Q = list(Q) + [Q[0]]

    def param(R):
        seg = np.linalg.norm(np.diff(pos[R], axis=0), axis=1) if len(R) > 1 else np.zeros(0)
        t = np.concatenate([[0.0], np.cumsum(seg)])
        return t / t[-1] if t[-1] > 0 else np.linspace(0.0, 1.0, len(R))

    tp, tq = param(P), param(Q)
    i = j = 0
    out = []
    while i < len(P) - 1 or j < len(Q) - 1:
        if i == len(P) - 1:
            adv_p = False
        elif j == len(Q) - 1:
            adv_p = True
        elif tp[i + 1] != tq[j + 1]:
            adv_p = tp[i + 1] < tq[j + 1]
        else:
            adv_p = (np.linalg.norm(pos[P[i + 1]] - pos[Q[j]])
                     <= np.linalg.norm(pos[P[i]] - pos[Q[j + 1]]))
        if adv_p:
            out.append(("p", P[i], P[i + 1], Q[j]))
            i += 1
        else:
            out.append(("q", Q[j], Q[j + 1], P[i]))
            j += 1
    return out


def _runs(mask, bridge_gaps=RUN_GAP):
    """Maximal circular runs of True as (start, length); a full loop gives (0, n).

    False stretches shorter than ``bridge_gaps`` between two True stretches
    are absorbed, so jagged rims yield one run instead of many fragments.
    """
    mask = np.asarray(mask, bool).copy()
    n = len(mask)
    if mask.any() and not mask.all() and bridge_gaps > 0:
        start = int(np.flatnonzero(mask)[0])
        rolled = np.roll(mask, -start)
        false_idx = np.flatnonzero(~rolled)
        # Split false positions into consecutive stretches; interior ones get filled.
        breaks = np.flatnonzero(np.diff(false_idx) > 1)
        for seg in np.split(false_idx, breaks + 1):
            if len(seg) < bridge_gaps:
                rolled[seg] = True
        mask = np.roll(rolled, start)
    if mask.all():
        return [(0, n)]
    if not mask.any():
        return []
    start = int(np.flatnonzero(~mask)[0]) + 1
    runs, cur = [], None
    for k in range(n):
        i = (start + k) % n
        if mask[i]:
            if cur is None:
                cur = [i, 0]
            cur[1] += 1
        elif cur is not None:
            runs.append(tuple(cur))
            cur = None
    if cur is not None:
        runs.append(tuple(cur))
    return runs


def stitch_gaps(mesh: LayeredMesh, max_bridge: float) -> LayeredMesh:
    """Zip facing open boundary loops together with triangle strips.

    For each pair of boundary loops, the stretches of loop A whose nearest
    loop-B vertex lies within ``max_bridge`` are connected to the matching
    stretch of B.  Existing vertices never move and no vertex is added.
    Triangles that would make an edge non-manifold are skipped.
    """
    m = mesh.mesh
    faces = m.faces
    if not len(faces):
        return mesh
    loops = [lp for lp in boundary_loops(faces) if len(lp) >= 3]
    if len(loops) < 2:
        return mesh
    pos = m.vertices
    uniq, counts = edge_counts(faces)
    ecount = {(int(a), int(b)): int(c) for (a, b), c in zip(uniq, counts)}
    loop_dir = {}
    for a, b in boundary_edges(faces).tolist():
        loop_dir[(a, b)] = True
    trees = [cKDTree(pos[lp]) for lp in loops]

    pairs = []
    for i in range(len(loops)):
        for j in range(i + 1, len(loops)):
            d, _ = trees[j].query(pos[loops[i]])
            if d.min() <= max_bridge:
                pairs.append((float(d.min()), i, j))
    pairs.sort()
    new_faces = []
    min_area2 = 1e-10 * m.diameter() ** 2

    def add(tri):
        a, b, c = tri
        if len({a, b, c}) < 3:
            return
        if np.linalg.norm(np.cross(pos[b] - pos[a], pos[c] - pos[a])) <= min_area2:
            return
        es = [(min(a, b), max(a, b)), (min(b, c), max(b, c)), (min(c, a), max(c, a))]
        if any(ecount.get(e, 0) >= 2 for e in es):
            return
        for e in es:
            ecount[e] = ecount.get(e, 0) + 1
        new_faces.append([a, b, c])

    for _, i, j in pairs:
        A, B = loops[i], loops[j]
        d, nb = trees[j].query(pos[A])
        # Mutual match: the B vertex must map back to roughly the same place on A.
        _, back = trees[i].query(pos[B[nb]])
        off = np.abs(back - np.arange(len(A)))
        off = np.minimum(off, len(A) - off)
        close = (d <= max_bridge) & (off <= MUTUAL_WINDOW)
        for s, length in _runs(close):
            closed = length == len(A)
            idx = [(s + k) % len(A) for k in range(length)]
            P = [int(A[k]) for k in idx]
            qidx = nb[idx]
            steps = (np.diff(qidx) + len(B) // 2) % len(B) - len(B) // 2
            direction = -1 if steps.sum() <= 0 else 1
            if direction != -1:
                # Facing rims run against each other; same-direction runs cannot
                # be bridged with a consistently oriented strip.
                continue
            if closed:
                # Whole-loop zips need B to hug A all the way round as well.
                if trees[i].query(pos[B])[0].max() > max_bridge:
                    continue
                Q = [int(B[(qidx[0] + direction * k) % len(B)]) for k in range(len(B))]
            else:
                span = ((qidx[-1] - qidx[0]) * direction) % len(B)
                if span > 2 * length + MUTUAL_WINDOW:
                    continue
                Q = [int(B[(qidx[0] + direction * k) % len(B)]) for k in range(span + 1)]
            if not closed and (len(P) - 1) + (len(Q) - 1) < 3:
                continue
            for kind, u, v, w in _zipper(P, Q, pos, closed):
                # New faces traverse the consumed boundary edge against its existing direction.
                if loop_dir.get((u, v)):
                    add((v, u, w))
                else:
                    add((u, v, w))
    if not new_faces:
        return mesh
    labels = m.face_labels
    if labels is not None:
        # Strip faces inherit the label of the boundary face they attach to.
        lab_of_vertex = np.zeros(m.n_vertices, np.int64)
        lab_of_vertex[faces.ravel()] = np.repeat(labels, 3)
        nf = np.array(new_faces)
        labels = np.concatenate([labels, lab_of_vertex[nf[:, 0]]])
    out = TriMesh(pos, np.concatenate([faces, np.array(new_faces, np.int64)]),
                  normals=m.normals, face_labels=labels)
    return LayeredMesh(out, mesh.vertex_layer.copy(),
                       None if mesh.vertex_source is None else mesh.vertex_source.copy())


def reconstruct_label(stack: PeelStack, label: int, tau_disc: Optional[float] = None,
                      eps_weld: Optional[float] = None, max_bridge: Optional[float] = None,
                      fill_mesh: Optional[TriMesh] = None) -> LayeredMesh:
    """meshify every layer, merge, optionally add an external fill mesh, then stitch."""
    violations = validate_stack(stack)
    if violations:
        raise InvalidStack(violations)
    parts = [meshify_layer(stack, l, label, tau_disc) for l in range(1, stack.layers + 1)]
    if fill_mesh is not None:
        fm = TriMesh(fill_mesh.vertices, fill_mesh.faces,
                     face_labels=np.full(fill_mesh.n_faces, label))
        parts.append(LayeredMesh(fm, np.full(fm.n_vertices, FILL),
                                 -np.ones((fm.n_vertices, 3), np.int64)))
    merged = merge_layers(parts, eps_weld)
    if max_bridge is None:
        max_bridge = default_max_bridge(stack, label)
    return drop_unused_vertices(stitch_gaps(merged, max_bridge))


def drop_unused_vertices(lm: LayeredMesh) -> LayeredMesh:
    """Remove vertices no face references (isolated texels), keeping the order of the rest."""
    m = lm.mesh
    used = np.zeros(m.n_vertices, bool)
    used[m.faces.ravel()] = True
    if used.all():
        return lm
    remap = np.cumsum(used) - 1
    mesh = TriMesh(m.vertices[used], remap[m.faces],
                   normals=None if m.normals is None else m.normals[used],
                   face_labels=m.face_labels)
    return LayeredMesh(mesh, lm.vertex_layer[used],
                       None if lm.vertex_source is None else lm.vertex_source[used])


def default_max_bridge(stack: PeelStack, label: Optional[int] = None) -> float:
    """Twice ``DISC_SLOPE`` pixel footprints at the median valid depth of ``label``.

    Rims left by the discontinuity cut on both sides of a silhouette are each
    up to about ``DISC_SLOPE`` footprints deep, so the gap between them can
    reach twice that.
    """
    ok = stack.valid
    if label is not None:
        ok = ok & (stack.seg == label)
    if not ok.any():
        return 0.0
    return 2.0 * DISC_SLOPE * float(stack.camera.footprint(np.median(stack.depth[ok])))
