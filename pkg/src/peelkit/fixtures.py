"""Procedural test scenes: sphere, open cylinder skirt, two-garment mannequin, stacked planes.

All geometry is deterministic.  Textures are mapped by planar projection on
the xy plane, so no fixture has a uv seam.
"""
from __future__ import annotations

import numpy as np

from .core import (LABEL_PANTS, LABEL_TORSO_SKIN, LABEL_UPPER_CLOTHES, PeelError,
                   PinholeCamera, TriMesh)
from .render import Scene

FIXTURES = ("sphere", "cylinder_skirt", "two_garment_mannequin", "stacked_planes")
TEXTURES = ("constant", "checker", "stripes")
CONSTANT_COLOR = (180, 60, 40)
TEXTURE_SIZE = 256


class UnknownFixture(PeelError):
    pass


def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    """Icosahedron refined ``subdivisions`` times; 10 * 4**n + 2 vertices, outward faces."""
    p = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
             [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
             [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}
        new_faces = []

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new_faces
    v = np.array(verts) * radius + np.asarray(center, float)
    nrm = np.array(verts)
    return TriMesh(v, np.array(faces), normals=nrm / np.linalg.norm(nrm, axis=1, keepdims=True))


def open_cylinder(radius=0.6, y0=-0.6, y1=0.6, segments=64, rings=24, center_xz=(0.0, 0.0),
                  flare=0.0) -> TriMesh:
    """Open cylinder (no caps) around the y axis; ``flare`` widens the y1 end into a cone."""
    theta = 2 * np.pi * np.arange(segments) / segments
    ys = np.linspace(y0, y1, rings + 1)
    verts = []
    for i, y in enumerate(ys):
        r = radius * (1.0 + flare * i / rings)
        verts.append(np.column_stack([center_xz[0] + r * np.cos(theta), np.full(segments, y),
                                      center_xz[1] + r * np.sin(theta)]))
    verts = np.concatenate(verts)
    faces = []
    for i in range(rings):
        for j in range(segments):
            a = i * segments + j
            b = i * segments + (j + 1) % segments
            c = a + segments
            d = b + segments
            faces += [[a, c, b], [b, c, d]]
    return TriMesh(verts, np.array(faces))


def closed_capsule(radius=0.3, y0=-0.8, y1=0.8, segments=48, rings=24) -> TriMesh:
    """Closed tube with flat caps around the y axis."""
    tube = open_cylinder(radius, y0, y1, segments, rings)
    v = tube.vertices
    n = len(v)
    verts = np.vstack([v, [[0, y0, 0], [0, y1, 0]]])
    faces = list(tube.faces)
    top = n - segments
    for j in range(segments):
        k = (j + 1) % segments
        faces.append([n, j, k])
        faces.append([n + 1, top + k, top + j])
    return TriMesh(verts, np.array(faces))


def quad(z, half, label, color=None) -> TriMesh:
    v = np.array([[-half, -half, z], [half, -half, z], [half, half, z], [-half, half, z]])
    f = np.array([[0, 2, 1], [0, 3, 2]])
    return TriMesh(v, f, face_labels=np.full(2, label),
                   face_colors=None if color is None else np.tile(color, (2, 1)))


def make_texture(kind: str, size: int = TEXTURE_SIZE, period: int = 32) -> np.ndarray:
    """constant, checker (``period``-texel squares) or vertical stripes (8-texel bands)."""
    if kind == "constant":
        return np.tile(np.array(CONSTANT_COLOR, np.uint8), (size, size, 1))
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "checker":
        on = ((xx // period) + (yy // period)) % 2 == 0
        a, b = np.array([230, 40, 40], np.uint8), np.array([30, 60, 220], np.uint8)
    elif kind == "stripes":
        on = (xx // 8) % 2 == 0
        a, b = np.array([250, 220, 20], np.uint8), np.array([20, 120, 40], np.uint8)
    else:
        raise UnknownFixture(f"unknown texture {kind!r}")
    return np.where(on[..., None], a, b).astype(np.uint8)


def planar_uv(vertices, extent=1.2) -> np.ndarray:
    return np.column_stack([(vertices[:, 0] + extent) / (2 * extent),
                            (extent - vertices[:, 1]) / (2 * extent)])


def _dress(mesh: TriMesh, label: int, texture: np.ndarray) -> TriMesh:
    return TriMesh(mesh.vertices, mesh.faces, normals=mesh.normals,
                   face_labels=np.full(mesh.n_faces, label), uv=planar_uv(mesh.vertices),
                   texture=texture)


def default_camera(resolution: int = 128, hfov_deg: float = 70.0) -> PinholeCamera:
    """Camera at (0, 0, -2) looking down +z."""
    return PinholeCamera.from_fov(resolution, resolution, hfov_deg)


def make_scene(name: str, resolution: int = 128, texture: str = "checker",
               subdivisions: int = 4) -> Scene:
    """Build a named fixture scene viewed by :func:`default_camera`."""
    tex = make_texture(texture)
    cam = default_camera(resolution)
    if name == "sphere":
        meshes = [_dress(icosphere(subdivisions), LABEL_UPPER_CLOTHES, tex)]
    elif name == "cylinder_skirt":
        meshes = [_dress(open_cylinder(0.6, -0.6, 0.6, 64, 24, flare=0.3), LABEL_PANTS, tex)]
    elif name == "two_garment_mannequin":
        body = closed_capsule(0.28, -0.9, 0.9)
        top = open_cylinder(0.36, -0.75, -0.05, 48, 14)
        bottom = open_cylinder(0.36, 0.05, 0.8, 48, 15, flare=0.35)
        meshes = [_dress(body, LABEL_TORSO_SKIN, tex), _dress(top, LABEL_UPPER_CLOTHES, tex),
                  _dress(bottom, LABEL_PANTS, tex)]
    elif name == "stacked_planes":
        # Both quads project onto the same pixel square from the default camera.
        half = _half_extent_pixels(cam, resolution)
        front = quad(-1.0, half, LABEL_UPPER_CLOTHES)
        back = quad(0.0, 2 * half, LABEL_PANTS)
        meshes = [TriMesh(m.vertices, m.faces, face_labels=m.face_labels,
                          uv=planar_uv(m.vertices), texture=tex) for m in (front, back)]
    else:
        raise UnknownFixture(f"unknown fixture {name!r}; expected one of {FIXTURES}")
    return Scene(meshes, cam)


def _half_extent_pixels(cam: PinholeCamera, resolution: int) -> float:
    """World half-size at depth 1 whose edges fall midway between pixel centers."""
    px = resolution // 4 + 0.5
    return px / cam.fx


def count_boundary_loops(mesh: TriMesh) -> int:
    from .topology import boundary_loops
    return len(boundary_loops(mesh.faces))
