import numpy as np
import pytest

from peelkit import EmptyScene, PinholeCamera, Scene, TriMesh, peel_render, render_normal_map
from peelkit.fixtures import icosphere, make_texture, planar_uv

from conftest import scene, stack


def cam128():
    return PinholeCamera(128, 128, 100.0, 100.0, 64.0, 64.0)


def test_single_triangle_one_layer():
    tri = TriMesh([[-0.2, -0.2, 1.0], [0.3, -0.2, 1.0], [-0.2, 0.3, 1.0]], [[0, 1, 2]],
                  face_labels=[5])
    s = peel_render(Scene([tri], cam128()), 4)
    assert s.depth[0, 64, 64] == 1.0
    assert np.all(s.depth[1:, 64, 64] == 0)
    assert s.seg[0, 64, 64] == 5
    assert np.allclose(s.normal[0, 64, 64], [0, 0, -1])
    assert np.array_equal(s.rgb[0, 64, 64], [200, 200, 200])


def test_sphere_principal_pixel_depths():
    s = stack("sphere")
    c = s.camera
    x, y = int(c.cx), int(c.cy)
    # analytic ray-sphere hits along the optical axis from z = -2: z = 1 and z = 3
    # (faceting of the level-4 icosphere moves them by far less than 1e-2)
    assert abs(s.depth[0, y, x] - 1.0) < 1e-2
    assert abs(s.depth[1, y, x] - 3.0) < 1e-2
    assert np.all(s.depth[2:, y, x] == 0)


def test_sphere_depths_match_analytic_intersection():
    s = stack("sphere")
    cam = s.camera
    ys, xs = np.nonzero(s.valid[0] & s.valid[1])
    d = np.column_stack([(xs - cam.cx) / cam.fx, (ys - cam.cy) / cam.fy, np.ones(len(xs))])
    o = cam.center
    # |o + t d|^2 = 1 with depth = t (d has unit z)
    a = (d * d).sum(1)
    b = 2 * d @ o
    cc = o @ o - 1
    disc = np.sqrt(np.maximum(b * b - 4 * a * cc, 0))
    near, far = (-b - disc) / (2 * a), (-b + disc) / (2 * a)
    inner = disc > 0.5  # away from the silhouette, where faceting dominates
    # chord error of the level-4 icosphere is about 1.5e-3 of the radius
    assert np.abs(s.depth[0, ys, xs] - near)[inner].max() < 5e-3
    assert np.abs(s.depth[1, ys, xs] - far)[inner].max() < 5e-3


def test_stacked_planes_depths():
    s = stack("stacked_planes")
    cov = s.valid[0]
    assert cov.sum() > 0
    assert np.all(s.depth[0][cov] == 1.0) and np.all(s.depth[1][cov] == 2.0)
    assert np.all(s.depth[1][cov] > s.depth[0][cov])


def test_fronto_parallel_normal_map():
    n = render_normal_map(scene("stacked_planes"))
    cov = np.any(n != 0, axis=-1)
    assert np.allclose(n[cov], [0, 0, -1])


def test_sphere_principal_normal():
    n = render_normal_map(scene("sphere"))
    c = scene("sphere").camera
    assert np.allclose(n[int(c.cy), int(c.cx)], [0, 0, -1], atol=0.05)


@pytest.mark.parametrize("name", ["sphere", "two_garment_mannequin"])
def test_normal_map_matches_first_layer(name):
    assert np.array_equal(render_normal_map(scene(name)), stack(name).normal[0])


def test_closed_mesh_hit_parity():
    s = stack("sphere")
    n = s.valid.sum(axis=0)
    assert np.all((n % 2 == 0) | (n == s.layers))


@pytest.mark.parametrize("name", ["sphere", "cylinder_skirt", "two_garment_mannequin"])
def test_normals_face_the_ray(name):
    s = stack(name)
    cam = s.camera
    l, y, x = np.nonzero(s.valid)
    d = np.column_stack([(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, np.ones(len(x))])
    assert np.all(np.einsum("ij,ij->i", s.normal[l, y, x], d) < 0)


def test_thread_count_does_not_change_stack():
    a = stack("two_garment_mannequin")
    b = peel_render(scene("two_garment_mannequin"), 4, threads=8)
    for ch in ("depth", "rgb", "seg", "normal"):
        assert getattr(a, ch).tobytes() == getattr(b, ch).tobytes()


def test_texture_sampled_nearest():
    tex = make_texture("constant")
    m = icosphere(3)
    m = TriMesh(m.vertices, m.faces, face_labels=np.full(m.n_faces, 5),
                uv=planar_uv(m.vertices), texture=tex)
    s = peel_render(Scene([m], PinholeCamera.from_fov(64, 64, 70.0)), 2)
    assert np.all(s.rgb[s.valid] == tex[0, 0])


def test_empty_scene():
    with pytest.raises(EmptyScene):
        peel_render(Scene([], cam128()), 4)


def test_unlabeled_faces_rejected():
    with pytest.raises(ValueError):
        Scene([TriMesh(np.eye(3), [[0, 1, 2]])], cam128())
