import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from peelkit import (DRAFT_WEIGHTS, PAPER_WEIGHTS, DimensionMismatch, LossWeights,
                     NotADistribution, PeelStack, PinholeCamera, TriMesh, iou, l_depth, l_norm,
                     l_rgb, l_seg, nre, p2s, total_loss)
from peelkit.core import EmptyInput
from peelkit.fixtures import icosphere
from peelkit.metrics import (closest_point_on_triangles, combine_losses, one_hot, sample_surface,
                             surface_distances, surface_distances_brute)


def random_stack(rng, L=4, H=4, W=4):
    cam = PinholeCamera(W, H, 10.0, 10.0, W / 2, H / 2)
    valid = rng.random((L, H, W)) < 0.7
    depth = np.where(valid, np.sort(rng.uniform(0.5, 3, (L, H, W)), axis=0), 0).astype(np.float32)
    n = rng.normal(size=(L, H, W, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return PeelStack(cam, depth, np.where(valid[..., None], rng.integers(0, 256, (L, H, W, 3)), 0),
                     np.where(valid, rng.integers(1, 6, (L, H, W)), 0),
                     np.where(valid[..., None], n, 0))


# --- scalar-loop oracles -----------------------------------------------------------

def loop_l1(a, b, scale=1.0):
    s = 0.0
    for x, y in zip(np.asarray(a, float).ravel(), np.asarray(b, float).ravel()):
        s += abs(x - y) / scale
    return s


def loop_l2(a, b):
    s = 0.0
    for x, y in zip(np.asarray(a, float).ravel(), np.asarray(b, float).ravel()):
        s += (x - y) ** 2
    return s


def loop_ce(prob, labels):
    s = 0.0
    P = prob.reshape(-1, prob.shape[-1])
    for p, g in zip(P, labels.ravel()):
        s += -math.log(max(p[g], 1e-12))
    return s


def loop_iou(a, b, c):
    inter = union = 0
    for x, y in zip(a.ravel(), b.ravel()):
        inter += (x == c) and (y == c)
        union += (x == c) or (y == c)
    return 1.0 if union == 0 else inter / union


def loop_nre(a, b):
    tot, n = 0.0, 0
    for x, y in zip(a.reshape(-1, 3), b.reshape(-1, 3)):
        if np.any(x != 0) and np.any(y != 0):
            tot += math.sqrt(sum((float(p) - float(q)) ** 2 for p, q in zip(x, y)))
            n += 1
    return tot / n


def rel_close(a, b, rel=1e-6):
    return abs(a - b) <= rel * max(abs(b), 1e-300)


@pytest.mark.parametrize("seed", range(5))
def test_losses_match_loops(seed):
    rng = np.random.default_rng(seed)
    p, g = random_stack(rng), random_stack(rng)
    assert rel_close(l_depth(p, g), loop_l1(p.depth, g.depth))
    assert rel_close(l_rgb(p, g), loop_l1(p.rgb, g.rgb, 255.0))
    assert rel_close(l_norm(p, g), loop_l2(p.normal, g.normal))
    prob = rng.dirichlet(np.ones(6), size=(4, 4, 4))
    assert rel_close(l_seg(prob, g.seg), loop_ce(prob, g.seg))
    for c in range(1, 6):
        assert rel_close(iou(p.seg, g.seg, c), loop_iou(p.seg, g.seg, c))
    assert rel_close(nre(p.normal[0], g.normal[0]), loop_nre(p.normal[0], g.normal[0]))


def test_identities_exact():
    rng = np.random.default_rng(9)
    s = random_stack(rng)
    assert l_depth(s, s) == 0 and l_rgb(s, s) == 0 and l_norm(s, s) == 0
    assert l_seg(one_hot(s.seg, 6), s.seg) == 0
    assert total_loss(s, s) == 0
    assert iou(s.seg, s.seg, 3) == 1.0
    assert nre(s.normal[0], s.normal[0]) == 0
    ico = icosphere(2)
    assert p2s(ico.vertices, ico) == 0


def test_l_depth_single_texel():
    a = np.zeros((4, 4, 4), np.float32)
    b = a.copy()
    b[2, 1, 3] = 0.5
    assert l_depth(a, b) == 0.5


def test_l_norm_single_component():
    a = np.zeros((1, 2, 2, 3))
    b = a.copy()
    b[0, 0, 0, 1] = 0.2
    assert np.isclose(l_norm(a, b), 0.04)


def test_l_seg_uniform_four_classes():
    assert np.isclose(l_seg(np.full((1, 4), 0.25), np.array([2])), math.log(4), atol=1e-12)


def test_l_seg_rejects_non_distribution():
    with pytest.raises(NotADistribution):
        l_seg(np.full((1, 4), 0.3), np.array([0]))


def test_l_seg_clamps_zero_probability():
    assert np.isclose(l_seg(np.array([[1.0, 0.0]]), np.array([1])), -math.log(1e-12))


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        l_depth(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))
    with pytest.raises(DimensionMismatch):
        iou(np.zeros((2, 2)), np.zeros((3, 2)), 1)


def test_mean_variant():
    rng = np.random.default_rng(2)
    p, g = random_stack(rng), random_stack(rng)
    n = int((p.valid | g.valid).sum())
    assert np.isclose(l_depth(p, g, mean=True), l_depth(p, g) / n)


def test_total_loss_default_weights():
    assert np.isclose(combine_losses({"depth": 1, "seg": 1, "norm": 1, "rgb": 1}), 2.15)
    assert combine_losses({"depth": 0, "seg": 0, "norm": 0, "rgb": 0}) == 0
    assert (PAPER_WEIGHTS.depth, PAPER_WEIGHTS.seg, PAPER_WEIGHTS.norm, PAPER_WEIGHTS.rgb) == \
        (1.0, 0.1, 1.0, 0.05)
    assert (DRAFT_WEIGHTS.depth, DRAFT_WEIGHTS.seg, DRAFT_WEIGHTS.norm, DRAFT_WEIGHTS.rgb) == \
        (1.0, 1.0, 0.1, 0.001)


@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_total_loss_linear(c):
    comp = dict(zip(("depth", "seg", "norm", "rgb"), c))
    twice = {k: 2 * v for k, v in comp.items()}
    assert np.isclose(combine_losses(twice), 2 * combine_losses(comp))


def test_total_loss_on_stacks():
    rng = np.random.default_rng(4)
    p, g = random_stack(rng), random_stack(rng)
    prob = one_hot(p.seg, 6)
    expect = (l_depth(p, g) + 0.1 * l_seg(prob, g.seg) + l_norm(p, g) + 0.05 * l_rgb(p, g))
    assert np.isclose(total_loss(p, g, seg_prob=prob), expect)


def test_loss_weights_validated():
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(float("nan"), 0, 0, 0)


@given(st.integers(0, 10_000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, g = random_stack(rng, 2, 3, 3), random_stack(rng, 2, 3, 3)
    assert l_depth(p, g) >= 0 and l_rgb(p, g) >= 0 and l_norm(p, g) >= 0


# --- iou / nre -------------------------------------------------------------------

def test_iou_examples():
    a = np.array([[1, 1], [0, 0]])
    b = np.array([[1, 0], [1, 0]])
    assert np.isclose(iou(a, b, 1), 1 / 3)
    assert iou(a, np.array([[0, 0], [1, 1]]), 1) == 0.0


@given(st.integers(0, 10_000))
def test_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, (5, 5)), rng.integers(0, 3, (5, 5))
    assert iou(a, b, 1) == iou(b, a, 1)
    assert 0 <= iou(a, b, 1) <= 1


def test_nre_antiparallel():
    rng = np.random.default_rng(0)
    n = rng.normal(size=(6, 6, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    assert np.isclose(nre(n, -n), 2.0)


def test_nre_ignores_background():
    a = np.zeros((2, 2, 3))
    b = np.zeros((2, 2, 3))
    a[0, 0] = b[0, 0] = [0, 0, -1]
    a[1, 1] = [0, 0, -1]  # valid only in a
    assert nre(a, b) == 0.0
    with pytest.raises(EmptyInput):
        nre(np.zeros((2, 2, 3)), b)


# --- p2s ------------------------------------------------------------------------

def brute_point_triangle(p, a, b, c):
    """Closest point by minimizing over a dense barycentric grid refined with the 3 edges."""
    best = np.inf
    for q in (a, b, c):
        best = min(best, np.linalg.norm(p - q))
    for u, v in ((a, b), (b, c), (c, a)):
        e = v - u
        t = np.clip((p - u) @ e / (e @ e), 0, 1)
        best = min(best, np.linalg.norm(p - (u + t * e)))
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - ((p - a) @ n) * n
    # inside test by same-side signs
    s = [np.cross(v - u, q - u) @ n for u, v in ((a, b), (b, c), (c, a))]
    if all(x >= 0 for x in s) or all(x <= 0 for x in s):
        best = min(best, abs((p - a) @ n))
    return best


def test_closest_point_against_scalar_oracle():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        q = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
        assert abs(np.linalg.norm(p - q) - brute_point_triangle(p, a, b, c)) <= 1e-12


def test_p2s_accelerated_equals_brute():
    rng = np.random.default_rng(11)
    v = rng.normal(size=(300, 3))
    f = np.array([rng.choice(300, 3, replace=False) for _ in range(500)])
    mesh = TriMesh(v, f)
    pts = rng.normal(size=(100, 3)) * 1.5
    fast = surface_distances(pts, mesh)
    brute = surface_distances_brute(pts, mesh)
    assert np.abs(fast - brute).max() <= 1e-12


def test_p2s_scalar_loop_oracle():
    rng = np.random.default_rng(12)
    mesh = icosphere(1)
    pts = rng.normal(size=(100, 3))
    loop = sum(min(brute_point_triangle(p, *mesh.vertices[f]) for f in mesh.faces) for p in pts)
    assert rel_close(p2s(pts, mesh), loop / 100)


def test_p2s_sphere_offset():
    big = icosphere(4, radius=1.1)
    pts = sample_surface(icosphere(5), 2000, seed=1)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    # chord deviation of the level-4 icosphere: max edge e gives sagitta r - sqrt(r^2 - e^2/3)
    e = np.linalg.norm(big.vertices[big.faces[:, 0]] - big.vertices[big.faces[:, 1]], axis=1).max()
    sag = 1.1 - math.sqrt(1.1 ** 2 - e ** 2 / 3)
    assert abs(p2s(pts, big) - 0.1) <= 2 * sag


def test_p2s_points_on_surface():
    mesh = icosphere(3)
    assert p2s(sample_surface(mesh, 500), mesh) <= 1e-9


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_p2s_translation_invariant(t):
    mesh = icosphere(1)
    pts = np.random.default_rng(0).normal(size=(30, 3))
    moved = TriMesh(mesh.vertices + t, mesh.faces)
    assert np.isclose(p2s(pts + t, moved), p2s(pts, mesh), rtol=1e-9, atol=1e-9)


def test_p2s_empty():
    with pytest.raises(EmptyInput):
        p2s(np.zeros((0, 3)), icosphere(1))
