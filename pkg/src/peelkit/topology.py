"""Combinatorial helpers on triangle index arrays: edges, boundary loops, components, cuts."""
from __future__ import annotations

from collections import defaultdict, deque

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def directed_edges(faces) -> np.ndarray:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    return np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)


def edge_counts(faces):
    """Map undirected edge (i, j), i < j, to the number of incident faces."""
    e = np.sort(directed_edges(faces), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def boundary_edges(faces) -> np.ndarray:
    """Directed edges (a, b) whose undirected edge has exactly one incident face."""
    d = directed_edges(faces)
    if not len(d):
        return d
    key = np.sort(d, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return d[counts[inv.reshape(-1)] == 1]


def boundary_loops(faces):
    """Boundary edges chained into closed vertex cycles, following face orientation.

    Interior lies to the left of each loop for counter-clockwise faces.
    Returns a list of int arrays; deterministic order (smallest start edge first).
    """
    be = boundary_edges(faces)
    nxt = defaultdict(list)
    for a, b in sorted(map(tuple, be.tolist())):
        nxt[a].append(b)
    used = set()
    loops = []
    for a, b in sorted(map(tuple, be.tolist())):
        if (a, b) in used:
            continue
        loop = [a]
        cur, nb = a, b
        while (cur, nb) not in used:
            used.add((cur, nb))
            if nb == a:
                break
            loop.append(nb)
            cur = nb
            cands = [w for w in nxt[cur] if (cur, w) not in used]
            if not cands:
                break
            nb = cands[0]
        loops.append(np.array(loop, dtype=np.int64))
    return loops


def face_components(faces) -> np.ndarray:
    """Label faces by edge-connected component (labels ordered by first face)."""
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    nf = len(f)
    if nf == 0:
        return np.zeros(0, np.int64)
    d = directed_edges(f)
    key = np.sort(d, axis=1)
    fid = np.repeat(np.arange(nf), 3)
    order = np.lexsort((key[:, 1], key[:, 0]))
    ks, fs = key[order], fid[order]
    same = np.all(ks[1:] == ks[:-1], axis=1)
    a, b = fs[:-1][same], fs[1:][same]
    g = coo_matrix((np.ones(len(a)), (a, b)), shape=(nf, nf))
    _, lab = connected_components(g, directed=False)
    # Relabel by first occurrence for determinism.
    _, first = np.unique(lab, return_index=True)
    rank = np.empty(len(first), np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[lab]


def euler_characteristic(faces) -> int:
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    V = len(np.unique(f))
    E = len(edge_counts(f)[0])
    return V - E + len(f)


def is_disk(faces) -> bool:
    f = np.asarray(faces).reshape(-1, 3)
    if not len(f):
        return False
    _, counts = edge_counts(f)
    if counts.max() > 2:
        return False
    return (euler_characteristic(f) == 1 and len(boundary_loops(f)) == 1
            and face_components(f).max() == 0 and not nonmanifold_vertices(f))


def _corner_fans(faces, cut):
    """Group the faces around each vertex into fans separated by cut or boundary edges.

    Returns an array (F, 3) giving a fan id per face corner; corners sharing
    a vertex and a fan id stay welded when the mesh is cut.
    """
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    nf = len(f)
    n = nf * 3
    if nf == 0:
        return np.zeros((0, 3), np.int64)
    vs = f.ravel()
    ve = np.roll(f, -1, axis=1).ravel()
    cs = np.arange(n)
    ce = (cs // 3) * 3 + (cs % 3 + 1) % 3
    lo, hi = np.minimum(vs, ve), np.maximum(vs, ve)
    order = np.lexsort((hi, lo))
    lo_s, hi_s = lo[order], hi[order]
    same = (lo_s[1:] == lo_s[:-1]) & (hi_s[1:] == hi_s[:-1])
    # Keep only edges with exactly two incident faces.
    start = np.concatenate([[True], ~same])
    gid = np.cumsum(start) - 1
    size = np.bincount(gid)
    pair = same & (size[gid[1:]] == 2)
    i, j = order[:-1][pair], order[1:][pair]
    if cut:
        cut_arr = np.array(sorted(cut), dtype=np.int64).reshape(-1, 2)
        key = lo[i] * (vs.max() + 1) + hi[i]
        ckey = cut_arr[:, 0] * (vs.max() + 1) + cut_arr[:, 1]
        keep = ~np.isin(key, ckey)
        i, j = i[keep], j[keep]
    flip = vs[i] != vs[j]
    a1, a2 = cs[i], np.where(flip, ce[j], cs[j])
    b1, b2 = ce[i], np.where(flip, cs[j], ce[j])
    rows = np.concatenate([a1, b1])
    cols = np.concatenate([a2, b2])
    g = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, lab = connected_components(g, directed=False)
    return lab.reshape(nf, 3)


def cut_mesh(faces, cut_edges=()):
    """Duplicate vertices so faces are disconnected across ``cut_edges``.

    Non-manifold vertices (several fans) are split as a side effect.  Returns
    ``(new_faces, origin)`` where ``origin[i]`` is the source vertex of new
    vertex ``i``.  Vertex order follows first use in face order.
    """
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    cut = {(min(a, b), max(a, b)) for a, b in cut_edges}
    fans = _corner_fans(f, cut)
    key = {}
    origin = []
    out = np.empty_like(f)
    for fi in range(len(f)):
        for k in range(3):
            kk = (int(f[fi, k]), int(fans[fi, k]))
            if kk not in key:
                key[kk] = len(origin)
                origin.append(kk[0])
            out[fi, k] = key[kk]
    return out, np.array(origin, dtype=np.int64)


def nonmanifold_vertices(faces):
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    _, origin = cut_mesh(f)
    counts = np.bincount(origin)
    return set(np.flatnonzero(counts > 1).tolist())


def disk_cut_edges(faces):
    """Edges to cut so a connected manifold surface becomes a topological disk.

    Builds a breadth-first dual spanning tree over the faces; primal edges not
    crossed by it form a cut graph, whose dangling branches are pruned away.
    For a closed surface the pruned graph is empty when it is a sphere, in
    which case one interior edge path is cut open instead.
    """
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    edge_faces = defaultdict(list)
    for fi in range(len(f)):
        for k in range(3):
            a, b = int(f[fi, k]), int(f[fi, (k + 1) % 3])
            edge_faces[(min(a, b), max(a, b))].append(fi)
    adj = defaultdict(list)
    for e, lst in edge_faces.items():
        if len(lst) == 2:
            adj[lst[0]].append((lst[1], e))
            adj[lst[1]].append((lst[0], e))
    tree_edges = set()
    seen = {0}
    q = deque([0])
    while q:
        fi = q.popleft()
        for fj, e in sorted(adj[fi]):
            if fj not in seen:
                seen.add(fj)
                tree_edges.add(e)
                q.append(fj)
    cut = {e for e in edge_faces if e not in tree_edges}
    deg = defaultdict(int)
    for a, b in cut:
        deg[a] += 1
        deg[b] += 1
    changed = True
    while changed:
        changed = False
        for e in sorted(cut):
            if deg[e[0]] == 1 or deg[e[1]] == 1:
                cut.discard(e)
                deg[e[0]] -= 1
                deg[e[1]] -= 1
                changed = True
    boundary = {e for e, lst in edge_faces.items() if len(lst) == 1}
    interior_cut = cut - boundary
    if not boundary and not interior_cut:
        # Sphere: slit open along two consecutive edges.
        a, b, c = (int(x) for x in f[0])
        interior_cut = {(min(a, b), max(a, b)), (min(b, c), max(b, c))}
    return sorted(interior_cut)
