"""Atlas baking from RGB peel layers, validity masks, inpainting and gutter dilation.

Atlas images are stored row-major with row 0 at the top: texel (row r, col c)
has its center at uv ((c + 0.5) / R, 1 - (r + 0.5) / R).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import spsolve

from .core import LayeredMesh, PeelError, PeelStack, project
from .flatten import UVAtlas

OUTSIDE_CHART = 0
UNFILLED = 1
FILLED_FROM_PEELMAP = 2
MASK_PNG = {OUTSIDE_CHART: 0, UNFILLED: 128, FILLED_FROM_PEELMAP: 255}

TAU_Z_FOOTPRINTS = 3.0
MIN_AGREEMENT = 0.10
PATCH = 7
LEVELS = 4


class CameraMismatch(PeelError):
    pass


class NoBoundary(PeelError):
    pass


class MissingPatch(PeelError):
    pass


@dataclass
class TextureImage:
    rgb: np.ndarray  # (R, R, 3) uint8
    chart_map: Optional[np.ndarray] = None  # (R, R) int, -1 outside every chart
    chart_origins: List[tuple] = field(default_factory=list)  # per chart (row, col) of its top-left texel

    @property
    def resolution(self) -> int:
        return self.rgb.shape[0]

    def copy(self, rgb=None) -> "TextureImage":
        return TextureImage(self.rgb.copy() if rgb is None else rgb,
                            None if self.chart_map is None else self.chart_map.copy(),
                            list(self.chart_origins))


@dataclass
class ValidityMask:
    state: np.ndarray  # (R, R) uint8 in {OUTSIDE_CHART, UNFILLED, FILLED_FROM_PEELMAP}

    @property
    def filled(self):
        return self.state == FILLED_FROM_PEELMAP

    @property
    def unfilled(self):
        return self.state == UNFILLED

    @property
    def outside(self):
        return self.state == OUTSIDE_CHART

    def to_png_array(self) -> np.ndarray:
        out = np.zeros(self.state.shape, np.uint8)
        for k, v in MASK_PNG.items():
            out[self.state == k] = v
        return out

    @classmethod
    def from_png_array(cls, arr) -> "ValidityMask":
        arr = np.asarray(arr)
        state = np.full(arr.shape, OUTSIDE_CHART, np.uint8)
        state[arr >= 64] = UNFILLED
        state[arr >= 192] = FILLED_FROM_PEELMAP
        return cls(state)


def rasterize_chart(uv, faces, resolution):
    """Texels whose centers fall inside (or on an edge of) any triangle.

    Returns ``(rows, cols, face, bary)``; a texel on a shared edge is
    reported once, for the lowest face index.
    """
    R = resolution
    c = uv[:, 0] * R - 0.5
    r = (1.0 - uv[:, 1]) * R - 0.5
    tc, tr = c[faces], r[faces]
    c0 = np.clip(np.ceil(tc.min(axis=1) - 1e-9), 0, R - 1).astype(np.int64)
    c1 = np.clip(np.floor(tc.max(axis=1) + 1e-9), 0, R - 1).astype(np.int64)
    r0 = np.clip(np.ceil(tr.min(axis=1) - 1e-9), 0, R - 1).astype(np.int64)
    r1 = np.clip(np.floor(tr.max(axis=1) + 1e-9), 0, R - 1).astype(np.int64)
    nw = np.maximum(c1 - c0 + 1, 0)
    nh = np.maximum(r1 - r0 + 1, 0)
    cnt = nw * nh
    fid = np.repeat(np.arange(len(faces)), cnt)
    k = np.arange(int(cnt.sum())) - np.repeat(np.cumsum(cnt) - cnt, cnt)
    cc = c0[fid] + k % nw[fid]
    rr = r0[fid] + k // nw[fid]
    # Barycentrics in (col, row) space.
    ax, ay = tc[fid, 0], tr[fid, 0]
    bx, by = tc[fid, 1] - ax, tr[fid, 1] - ay
    cx, cy = tc[fid, 2] - ax, tr[fid, 2] - ay
    px, py = cc - ax, rr - ay
    den = bx * cy - by * cx
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (px * cy - py * cx) / den
        l2 = (bx * py - by * px) / den
    l0 = 1.0 - l1 - l2
    eps = 1e-9
    inside = (den != 0) & (l0 >= -eps) & (l1 >= -eps) & (l2 >= -eps)
    rr, cc, fid = rr[inside], cc[inside], fid[inside]
    bary = np.column_stack([l0[inside], l1[inside], l2[inside]])
    key = rr * R + cc
    order = np.lexsort((fid, key))  # lowest face first within each texel
    keep = order[np.concatenate([[True], np.diff(key[order]) != 0])] if len(order) else order
    return rr[keep], cc[keep], fid[keep], bary[keep]


def bake(atlas: UVAtlas, stack: PeelStack, mesh: Optional[LayeredMesh] = None,
         tau_z: Optional[float] = None, check_camera: bool = True):
    """Project every chart texel into the chart's RGB peel layer.

    A texel is FILLED when the nearest peel pixel in the chart's layer is
    valid and its depth agrees with the projected depth within ``tau_z``
    (default: three pixel footprints at the projected depth); otherwise it is
    UNFILLED.  Texels covered by no chart are OUTSIDE_CHART.
    ``mesh`` is accepted for interface symmetry; chart partitions carry the
    positions needed here.
    """
    R = atlas.resolution
    xyz, uv, chart_of_face, layers, origins = [], [], [], [], []
    for k, chart in enumerate(atlas.charts):
        sub = chart.partition.submesh
        xyz.append(sub.vertices[sub.faces])
        uv.append(atlas.atlas_uv(k)[sub.faces])
        chart_of_face.append(np.full(sub.n_faces, k))
        layers.append(chart.layer)
        p = atlas.placements[k]
        origins.append(chart_origin(p.rect, R, atlas.gutter))
    if not xyz:
        return (TextureImage(np.zeros((R, R, 3), np.uint8), np.full((R, R), -1, np.int64), []),
                ValidityMask(np.full((R, R), OUTSIDE_CHART, np.uint8)))
    return bake_faces(np.concatenate(xyz), np.concatenate(uv), np.concatenate(chart_of_face),
                      layers, stack, R, origins, tau_z, check_camera)


def chart_origin(rect, resolution, gutter) -> tuple:
    """Image (row, col) of the top-left texel inside a placement rect (y counted from the bottom)."""
    x, y, w, h = rect
    return int(resolution - (y + h) + gutter), int(x + gutter)


def bake_faces(tri_xyz, tri_uv, chart_of_face, chart_layers, stack: PeelStack, resolution: int,
               chart_origins=None, tau_z: Optional[float] = None, check_camera: bool = True):
    """Bake from per-face corner positions (F, 3, 3) and atlas uv (F, 3, 2)."""
    R = resolution
    cam = stack.camera
    F = len(tri_xyz)
    rgb = np.zeros((R, R, 3), np.uint8)
    state = np.full((R, R), OUTSIDE_CHART, np.uint8)
    chart_map = np.full((R, R), -1, np.int64)
    rr, cc, fid, bary = rasterize_chart(np.asarray(tri_uv, float).reshape(-1, 2),
                                        np.arange(3 * F).reshape(F, 3), R)
    if len(rr):
        pts = np.einsum("nk,nkj->nj", bary, tri_xyz[fid])
        pix, z = project(cam, pts)
        x = np.rint(pix[:, 0]).astype(np.int64)
        y = np.rint(pix[:, 1]).astype(np.int64)
        chart = np.asarray(chart_of_face)[fid]
        layer = np.asarray(chart_layers, np.int64)[chart] - 1
        ok = ((x >= 0) & (x < cam.width) & (y >= 0) & (y < cam.height)
              & (layer >= 0) & (layer < stack.layers))
        ls, xs, ys = np.where(ok, layer, 0), np.where(ok, x, 0), np.where(ok, y, 0)
        d = stack.depth[ls, ys, xs].astype(np.float64)
        tol = TAU_Z_FOOTPRINTS * cam.footprint(z) if tau_z is None else tau_z
        ok &= (d > 0) & (np.abs(d - z) <= tol)
        chart_map[rr, cc] = chart
        state[rr, cc] = np.where(ok, FILLED_FROM_PEELMAP, UNFILLED)
        rgb[rr[ok], cc[ok]] = stack.rgb[ls[ok], ys[ok], xs[ok]]
        covered, agree = len(rr), int(ok.sum())
        if check_camera and agree < MIN_AGREEMENT * covered:
            raise CameraMismatch(f"only {agree}/{covered} chart texels agree with the peel stack")
    return TextureImage(rgb, chart_map, list(chart_origins or [])), ValidityMask(state)


# --- inpainting -------------------------------------------------------------

def inpaint(img: TextureImage, mask: ValidityMask, mode: str = "exemplar", patch=None,
            seed: int = 0) -> TextureImage:
    """Give every UNFILLED texel a color; FILLED and OUTSIDE_CHART texels stay bit-identical."""
    if mode not in ("diffusion", "exemplar", "patch_tile"):
        raise ValueError(f"unknown inpaint mode {mode!r}")
    if (mode == "patch_tile") != (patch is not None):
        raise MissingPatch("a patch image is required for patch_tile and only for it")
    hole = mask.unfilled
    if not hole.any():
        return img.copy()
    if mode == "diffusion":
        out = diffuse(img.rgb, mask.state)
    elif mode == "patch_tile":
        out = tile_patch(img, hole, patch)
    else:
        out = exemplar_fill(img.rgb, mask.state, seed=seed)
    res = img.rgb.copy()
    res[hole] = out[hole]
    return img.copy(res)


_NEIGH8 = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


def diffuse(rgb, state) -> np.ndarray:
    """Discrete Laplace solve on UNFILLED texels with FILLED neighbors as Dirichlet values.

    The stencil is the 8-neighborhood with unit weights, so hole texels that
    touch color only diagonally still get a boundary value.  OUTSIDE_CHART
    neighbors are left out of the stencil (zero-flux boundary).
    """
    H, W = state.shape
    hole = state == UNFILLED
    filled = state == FILLED_FROM_PEELMAP
    idx = np.full((H, W), -1, np.int64)
    hr, hc = np.nonzero(hole)
    n = len(hr)
    idx[hr, hc] = np.arange(n)
    lab, nlab = ndimage.label(hole, structure=np.ones((3, 3)))
    touch = np.zeros(nlab + 1, bool)
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    b = np.zeros((n, 3))
    src = rgb.astype(np.float64)
    for dr, dc in _NEIGH8:
        r2, c2 = hr + dr, hc + dc
        inb = (r2 >= 0) & (r2 < H) & (c2 >= 0) & (c2 < W)
        r2c, c2c = np.where(inb, r2, 0), np.where(inb, c2, 0)
        nh = inb & hole[r2c, c2c]
        nf = inb & filled[r2c, c2c]
        diag += nh | nf
        rows.append(np.flatnonzero(nh))
        cols.append(idx[r2c[nh], c2c[nh]])
        b[nf] += src[r2c[nf], c2c[nf]]
        touch[lab[hr[nf], hc[nf]]] = True
    if not touch[1:].all():
        raise NoBoundary("an unfilled region touches no filled texel")
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    A = sp.csr_matrix((-np.ones(len(r)), (r, c)), shape=(n, n)) + sp.diags(diag)
    x = spsolve(A.tocsc(), b)
    out = rgb.copy()
    out[hr, hc] = np.clip(np.rint(x.reshape(n, 3)), 0, 255).astype(np.uint8)
    return out


def tile_patch(img: TextureImage, hole, patch) -> np.ndarray:
    """Periodic extension of ``patch`` anchored at each chart's top-left texel."""
    p = np.asarray(patch)
    if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] == 0 or p.shape[1] == 0:
        raise MissingPatch("patch must be a non-empty (h, w, 3) image")
    ph, pw = p.shape[:2]
    rr, cc = np.nonzero(hole)
    r0 = np.zeros(len(rr), np.int64)
    c0 = np.zeros(len(rr), np.int64)
    if img.chart_map is not None and img.chart_origins:
        k = img.chart_map[rr, cc]
        org = np.array(img.chart_origins, np.int64).reshape(-1, 2)
        has = k >= 0
        r0[has] = org[k[has], 0]
        c0[has] = org[k[has], 1]
    out = img.rgb.copy()
    out[rr, cc] = p[(rr - r0) % ph, (cc - c0) % pw]
    return out


def _downsample(rgb, state):
    H, W = state.shape
    h, w = (H + 1) // 2, (W + 1) // 2
    pad = ((0, 2 * h - H), (0, 2 * w - W))
    st = np.pad(state, pad, constant_values=OUTSIDE_CHART)
    im = np.pad(rgb.astype(np.float64), pad + ((0, 0),))
    blocks_s = st.reshape(h, 2, w, 2).transpose(0, 2, 1, 3).reshape(h, w, 4)
    blocks_i = im.reshape(h, 2, w, 2, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 4, 3)
    f = blocks_s == FILLED_FROM_PEELMAP
    nf = f.sum(axis=2)
    col = (blocks_i * f[..., None]).sum(axis=2) / np.maximum(nf, 1)[..., None]
    out = np.full((h, w), OUTSIDE_CHART, np.uint8)
    out[nf > 0] = FILLED_FROM_PEELMAP
    out[(blocks_s == UNFILLED).any(axis=2)] = UNFILLED
    return col, out


class _PatchMatch:
    """Parallel (Jacobi-style) PatchMatch over one pyramid level."""

    def __init__(self, img, state, rng):
        self.img = img
        self.state = state
        self.rng = rng
        H, W = state.shape
        r = PATCH // 2
        self.r = r
        filled = state == FILLED_FROM_PEELMAP
        full = ndimage.minimum_filter(filled.astype(np.uint8), size=PATCH, mode="constant", cval=0) > 0
        self.src = np.column_stack(np.nonzero(full))
        self.valid_src = full
        self.tgt = np.column_stack(np.nonzero(state == UNFILLED))
        off = np.arange(-r, r + 1)
        self.dr, self.dc = [a.ravel() for a in np.meshgrid(off, off, indexing="ij")]
        pad = r
        self.set_image(img)
        self.pw = np.pad((state != OUTSIDE_CHART).astype(np.float32), pad)

    def set_image(self, img):
        self.img = img
        r = self.r
        self.pimg = np.pad(img.astype(np.float32), ((r, r), (r, r), (0, 0)))

    def cost(self, tgt, src):
        r = self.r
        tr = tgt[:, 0:1] + self.dr + r
        tc = tgt[:, 1:2] + self.dc + r
        sr = src[:, 0:1] + self.dr + r
        sc = src[:, 1:2] + self.dc + r
        w = self.pw[tr, tc]
        d = ((self.pimg[tr, tc] - self.pimg[sr, sc]) ** 2).sum(axis=2)
        return (w * d).sum(axis=1) / np.maximum(w.sum(axis=1), 1.0)

    def refine(self, nnf, iters=4):
        H, W = self.state.shape
        best = self.cost(self.tgt, nnf)
        lut = np.full((H, W), -1, np.int64)
        lut[self.tgt[:, 0], self.tgt[:, 1]] = np.arange(len(self.tgt))
        for it in range(iters):
            # Propagation from the four neighbors, alternating scan sense.
            steps = ((-1, 0), (0, -1)) if it % 2 == 0 else ((1, 0), (0, 1))
            for dr, dc in steps + tuple((-a, -b) for a, b in steps):
                nr, nc = self.tgt[:, 0] + dr, self.tgt[:, 1] + dc
                inb = (nr >= 0) & (nr < H) & (nc >= 0) & (nc < W)
                j = np.full(len(self.tgt), -1)
                j[inb] = lut[nr[inb], nc[inb]]
                has = j >= 0
                cand = nnf.copy()
                cand[has] = nnf[j[has]] - np.array([dr, dc])
                cand = self._snap(cand)
                self._accept(nnf, best, cand)
            # Random search around the current match.
            rad = max(H, W)
            while rad >= 1:
                jit = self.rng.integers(-rad, rad + 1, size=nnf.shape)
                cand = self._snap(nnf + jit)
                self._accept(nnf, best, cand)
                rad //= 2
        return nnf

    def _snap(self, cand):
        H, W = self.state.shape
        cand = np.column_stack([np.clip(cand[:, 0], 0, H - 1), np.clip(cand[:, 1], 0, W - 1)])
        bad = ~self.valid_src[cand[:, 0], cand[:, 1]]
        if bad.any():
            cand[bad] = -1
        return cand

    def _accept(self, nnf, best, cand):
        ok = (cand[:, 0] >= 0) & np.any(cand != nnf, axis=1)
        if not ok.any():
            return
        c = np.full(len(cand), np.inf)
        c[ok] = self.cost(self.tgt[ok], cand[ok])
        better = c < best
        nnf[better] = cand[better]
        best[better] = c[better]


def _vote(img, state, tgt, nnf, r):
    """Each hole texel becomes the mean of the source texels that the
    overlapping target patches map it to (patches centered on hole texels)."""
    H, W = state.shape
    acc = np.zeros((H, W, 3))
    cnt = np.zeros((H, W))
    off = np.arange(-r, r + 1)
    for dr in off:
        for dc in off:
            pr, pc = tgt[:, 0] + dr, tgt[:, 1] + dc
            inb = (pr >= 0) & (pr < H) & (pc >= 0) & (pc < W)
            pr, pc = pr[inb], pc[inb]
            hole = state[pr, pc] == UNFILLED
            pr, pc = pr[hole], pc[hole]
            s = nnf[inb][hole]
            np.add.at(acc, (pr, pc), img[s[:, 0] + dr, s[:, 1] + dc])
            np.add.at(cnt, (pr, pc), 1.0)
    out = img.copy()
    m = cnt > 0
    out[m] = acc[m] / cnt[m][:, None]
    return out


def exemplar_fill(rgb, state, seed: int = 0, em_iters: int = 3) -> np.ndarray:
    """Multi-scale PatchMatch synthesis with 7x7 patches sourced from FILLED texels.

    Coarse levels are initialized by diffusion, matched, and the matches are
    upsampled to seed the next level.  Falls back to diffusion when no fully
    FILLED 7x7 source patch exists.
    """
    rng = np.random.default_rng(seed)
    pyr = [(rgb.astype(np.float64), state)]
    for _ in range(LEVELS - 1):
        im, st = pyr[-1]
        if min(st.shape) < 2 * PATCH:
            break
        pyr.append(_downsample(im, st))
    nnf_prev = None
    cur = None
    for lvl in range(len(pyr) - 1, -1, -1):
        im, st = pyr[lvl]
        im = im.copy()
        hole = st == UNFILLED
        if not hole.any():
            nnf_prev, cur = None, None
            continue
        pm = _PatchMatch(im, st, rng)
        if not len(pm.src):
            if lvl == 0:
                return diffuse(rgb, state)
            nnf_prev, cur = None, None
            continue
        # Initial guess for hole texels: upsampled coarser result, else diffusion.
        if cur is not None:
            up = np.repeat(np.repeat(cur, 2, axis=0), 2, axis=1)[:im.shape[0], :im.shape[1]]
            im[hole] = up[hole]
        else:
            im[hole] = _diffuse_float(im, st)[hole]
        pm.set_image(im)
        if nnf_prev is not None:
            prev_map = nnf_prev
            nnf = prev_map[np.minimum(pm.tgt[:, 0] // 2, prev_map.shape[0] - 1),
                           np.minimum(pm.tgt[:, 1] // 2, prev_map.shape[1] - 1)] * 2
            nnf = pm._snap(np.maximum(nnf, 0))
            missing = nnf[:, 0] < 0
        else:
            nnf = np.zeros_like(pm.tgt)
            missing = np.ones(len(pm.tgt), bool)
        if missing.any():
            nnf[missing] = pm.src[rng.integers(0, len(pm.src), size=int(missing.sum()))]
        finest = lvl == 0
        for _ in range(max(1, em_iters - 1) if finest else em_iters):
            nnf = pm.refine(nnf, iters=2 if finest else 4)
            im = _vote(im, st, pm.tgt, nnf, pm.r)
            pm.set_image(im)
        full = np.full(st.shape + (2,), -1, np.int64)
        full[pm.tgt[:, 0], pm.tgt[:, 1]] = nnf
        nnf_prev = full
        cur = im
    if cur is None or cur.shape[:2] != rgb.shape[:2]:
        return diffuse(rgb, state)
    out = rgb.copy()
    hole = state == UNFILLED
    out[hole] = np.clip(np.rint(cur[hole]), 0, 255).astype(np.uint8)
    return out


def _diffuse_float(im, st):
    """Diffusion initial guess on a float image; regions without boundary get the global mean."""
    filled = st == FILLED_FROM_PEELMAP
    mean = im[filled].mean(axis=0) if filled.any() else np.zeros(3)
    hole = st == UNFILLED
    lab, n = ndimage.label(hole, structure=np.ones((3, 3)))
    ok_st = st.copy()
    touching = np.unique(lab[ndimage.binary_dilation(filled, structure=np.ones((3, 3))) & hole])
    stranded = hole & ~np.isin(lab, touching)
    out = im.copy()
    out[stranded] = mean
    ok_st[stranded] = OUTSIDE_CHART
    if (ok_st == UNFILLED).any():
        q = np.clip(np.rint(im), 0, 255).astype(np.uint8)
        out[ok_st == UNFILLED] = diffuse(q, ok_st)[ok_st == UNFILLED]
    return out


def dilate_gutter(img: TextureImage, mask: ValidityMask, texels: int = 2) -> TextureImage:
    """Grow chart colors ``texels`` rings outward into OUTSIDE_CHART texels.

    Each ring takes the rounded mean of its already-colored 8-neighbors, so
    bilinear lookups near chart borders do not pick up background.
    """
    rgb = img.rgb.astype(np.float64)
    have = ~mask.outside
    H, W = have.shape
    for _ in range(texels):
        acc = np.zeros_like(rgb)
        cnt = np.zeros((H, W))
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if dr == 0 and dc == 0:
                    continue
                src = np.zeros_like(have)
                val = np.zeros_like(rgb)
                rs = slice(max(dr, 0), H + min(dr, 0))
                rd = slice(max(-dr, 0), H + min(-dr, 0))
                cs = slice(max(dc, 0), W + min(dc, 0))
                cd = slice(max(-dc, 0), W + min(-dc, 0))
                src[rd, cd] = have[rs, cs]
                val[rd, cd] = rgb[rs, cs]
                acc += val * src[..., None]
                cnt += src
        grow = ~have & (cnt > 0)
        rgb[grow] = np.rint(acc[grow] / cnt[grow][:, None])
        have = have | grow
    out = img.rgb.copy()
    ring = have & mask.outside
    out[ring] = np.clip(rgb[ring], 0, 255).astype(np.uint8)
    return img.copy(out)
