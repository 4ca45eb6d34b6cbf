import numpy as np
import pytest

from peelkit import (FILL, InvalidStack, LayeredMesh, PeelStack, PinholeCamera, TriMesh,
                     backproject, extract_garment, meshify_layer, merge_layers, stitch_gaps)
from peelkit.metrics import p2s, sample_surface, surface_distances
from peelkit.topology import boundary_edges

from conftest import FIXTURE_LABELS, recon, source_mesh, stack


def plane_stack(depth, label=5):
    """One-layer stack from a depth image (0 = background) seen by an identity camera."""
    depth = np.asarray(depth, np.float32)[None]
    L, H, W = depth.shape
    cam = PinholeCamera(W, H, 100.0, 100.0, (W - 1) / 2, (H - 1) / 2)
    ok = depth > 0
    normal = np.zeros((L, H, W, 3), np.float32)
    normal[ok] = [0, 0, -1]
    return PeelStack(cam, depth, np.zeros((L, H, W, 3), np.uint8), ok.astype(np.uint8) * label,
                     normal)


def grid_strip(nx, ny, h, origin):
    """Flat grid of nx by ny vertices with spacing h in the z=0 plane, faces oriented +z."""
    xs, ys = np.meshgrid(np.arange(nx) * h, np.arange(ny) * h)
    v = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)]) + origin
    idx = np.arange(nx * ny).reshape(ny, nx)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    f = np.concatenate([np.column_stack([a, b, d]), np.column_stack([a, d, c])])
    return LayeredMesh(TriMesh(v, f), np.ones(len(v), np.int64))


# --- backproject / extract --------------------------------------------------------

def test_backproject_single_texel():
    d = np.zeros((9, 9))
    d[4, 4] = 1.7
    pc = backproject(plane_stack(d))
    assert len(pc) == 1
    assert np.allclose(pc.points[0], [0, 0, 1.7])
    assert pc.source_pixel.tolist() == [[1, 4, 4]] and pc.layer_ids.tolist() == [1]


@pytest.mark.parametrize("name", sorted(FIXTURE_LABELS))
def test_backproject_count(name):
    s = stack(name)
    assert len(backproject(s)) == int(s.valid.sum())


@pytest.mark.parametrize("name", ["sphere", "cylinder_skirt"])
def test_backprojected_points_on_source_surface(name):
    s = stack(name)
    pc = backproject(s)
    cam = s.camera
    fp = cam.footprint(s.depth[s.valid].astype(np.float64))
    if name == "sphere":
        dist = np.abs(np.linalg.norm(pc.points, axis=1) - 1.0)
    else:
        dist = surface_distances(pc.points, source_mesh(name, FIXTURE_LABELS[name][0]))
    assert np.all(dist <= 2 * fp)


def test_backproject_rejects_invalid_stack():
    s = stack("sphere")
    d = s.depth.copy()
    y, x = np.argwhere(s.valid[1])[0]
    d[1, y, x] = 0.5 * d[0, y, x]
    with pytest.raises(InvalidStack):
        backproject(s.replace(depth=d))


def test_extract_garment():
    pc = backproject(stack("two_garment_mannequin"))
    assert len(extract_garment(pc, 77)) == 0
    parts = [extract_garment(pc, l) for l in FIXTURE_LABELS["two_garment_mannequin"]]
    assert sum(len(p) for p in parts) == len(pc)
    single = backproject(stack("sphere"))
    same = extract_garment(single, 5)
    assert np.array_equal(same.points, single.points)
    with pytest.raises(ValueError):
        extract_garment(pc, 0)


def test_extract_preserves_order():
    pc = backproject(stack("two_garment_mannequin"))
    sub = extract_garment(pc, 9)
    idx = np.flatnonzero(pc.labels == 9)
    assert np.array_equal(sub.points, pc.points[idx])


# --- meshify ------------------------------------------------------------------------

def test_meshify_full_grid():
    W, H = 16, 12
    lm = meshify_layer(plane_stack(np.ones((H, W))), 1, 5)
    assert lm.mesh.n_faces == (W - 1) * (H - 1) * 2
    assert lm.mesh.n_vertices == W * H and np.all(lm.vertex_layer == 1)


def test_meshify_step_cut():
    d = np.ones((10, 12))
    d[:, 6:] = 2.0
    lm = meshify_layer(plane_stack(d), 1, 5, tau_disc=0.1)
    z = lm.mesh.vertices[:, 2][lm.mesh.faces]
    assert np.all(z.max(1) - z.min(1) == 0)
    assert lm.mesh.n_faces == 2 * (2 * 9 * 5)


def test_meshify_single_texel():
    d = np.zeros((5, 5))
    d[2, 2] = 1.0
    lm = meshify_layer(plane_stack(d), 1, 5)
    assert lm.mesh.n_vertices == 1 and lm.mesh.n_faces == 0


def test_meshify_three_corner_block():
    d = np.zeros((4, 4))
    d[1, 1] = d[1, 2] = d[2, 1] = 1.0
    lm = meshify_layer(plane_stack(d), 1, 5)
    assert lm.mesh.n_faces == 1


def test_meshify_layer_range():
    with pytest.raises(ValueError):
        meshify_layer(stack("sphere"), 5, 5)


@pytest.mark.parametrize("name", ["sphere", "two_garment_mannequin"])
def test_meshify_respects_tau_disc(name):
    s = stack(name)
    for label in FIXTURE_LABELS[name]:
        for layer in range(1, s.layers + 1):
            tau = 0.05
            lm = meshify_layer(s, layer, label, tau)
            if not lm.mesh.n_faces:
                continue
            src = lm.vertex_source[lm.mesh.faces]
            z = s.depth[layer - 1, src[..., 2], src[..., 1]].astype(np.float64)
            gaps = np.abs(z - np.roll(z, -1, axis=1)).max(1)
            assert gaps.max() <= tau


def test_meshify_faces_camera_on_first_layer():
    lm = meshify_layer(plane_stack(np.ones((6, 6))), 1, 5)
    assert np.all(lm.mesh.face_normals() @ [0, 0, -1] > 0.99)


# --- merge -----------------------------------------------------------------------

def test_merge_single_part_unchanged():
    p = grid_strip(4, 3, 0.01, [0, 0, 0])
    m = merge_layers([p])
    assert np.array_equal(m.mesh.vertices, p.mesh.vertices)
    assert np.array_equal(m.mesh.faces, p.mesh.faces)


def test_merge_disjoint_parts():
    a = grid_strip(4, 3, 0.01, [0, 0, 0])
    b = grid_strip(4, 3, 0.01, [1, 0, 0])
    m = merge_layers([a, b], 1e-6)
    assert m.mesh.n_vertices == a.mesh.n_vertices + b.mesh.n_vertices
    assert m.mesh.n_faces == a.mesh.n_faces + b.mesh.n_faces


def test_merge_welds_shared_column():
    a = grid_strip(4, 5, 0.01, [0, 0, 0])
    b = grid_strip(4, 5, 0.01, [0.03, 0, 0])
    b.vertex_layer[:] = 2
    m = merge_layers([a, b], 1e-6)
    assert m.mesh.n_vertices == 4 * 5 + 4 * 5 - 5
    assert m.mesh.n_faces == a.mesh.n_faces + b.mesh.n_faces
    # survivors of the shared column keep the first part's tag
    shared = np.isclose(m.mesh.vertices[:, 0], 0.03)
    assert shared.sum() == 5 and np.all(m.vertex_layer[shared] == 1)


# --- stitch ----------------------------------------------------------------------

def test_stitch_closed_mesh_unchanged():
    from peelkit.fixtures import icosphere
    ico = icosphere(2)
    lm = LayeredMesh(ico, np.ones(ico.n_vertices, np.int64))
    out = stitch_gaps(lm, 1.0)
    assert np.array_equal(out.mesh.faces, ico.faces)


def _two_strips(gap):
    h = 0.002
    a = grid_strip(20, 4, h, [0, 0, 0])
    b = grid_strip(20, 4, h, [0, 3 * h + gap, 0])
    return merge_layers([a, b], 1e-9)


def test_stitch_parallel_strips():
    m = _two_strips(0.001)
    before = len(boundary_edges(m.mesh.faces))
    out = stitch_gaps(m, 0.005)
    after = len(boundary_edges(out.mesh.faces))
    assert after <= before - 2
    assert np.array_equal(out.mesh.vertices[:m.mesh.n_vertices], m.mesh.vertices)


def test_stitch_gap_wider_than_bridge():
    m = _two_strips(0.02)
    out = stitch_gaps(m, 0.005)
    assert out.mesh.n_faces == m.mesh.n_faces


def test_stitch_sphere_reduces_boundary():
    s = stack("sphere")
    from peelkit.reconstruct import default_max_bridge
    parts = [meshify_layer(s, l, 5) for l in range(1, s.layers + 1)]
    merged = merge_layers(parts)
    out = stitch_gaps(merged, default_max_bridge(s, 5))
    assert len(boundary_edges(out.mesh.faces)) < len(boundary_edges(merged.mesh.faces))
    n = merged.mesh.n_vertices
    assert out.mesh.vertices[:n].tobytes() == merged.mesh.vertices.tobytes()
    new = out.vertex_layer[n:]
    assert np.all(new == FILL)


@pytest.mark.parametrize("name", ["sphere", "cylinder_skirt"])
def test_reconstruction_p2s(name):
    s = stack(name)
    label = FIXTURE_LABELS[name][0]
    lm = recon(name, label)
    ok = s.valid & (s.seg == label)
    fp = float(s.camera.footprint(s.depth[ok].astype(np.float64)).mean())
    assert p2s(sample_surface(lm.mesh, 20000), source_mesh(name, label)) <= 2 * fp
