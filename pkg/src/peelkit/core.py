"""Core data types for peeled representations: camera, peel stacks, meshes, clouds.

Conventions used throughout the package:

* camera space is x right, y down, z forward; depth is camera-space Z;
* pixel ``(x, y)`` has its center at continuous image coordinate ``(x, y)``,
  so the principal ray passes through the pixel at ``(cx, cy)``;
* layer indices are 1-based when they appear as tags (``vertex_layer``,
  ``layer_ids``) and 0-based when they index arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

FILL = 0  # vertex_layer tag for vertices created by gap stitching
DEFAULT_LAYERS = 4
MAX_LAYERS = 8

# CIHP-style label ids used by the fixtures.
LABEL_BACKGROUND = 0
LABEL_UPPER_CLOTHES = 5
LABEL_PANTS = 9
LABEL_TORSO_SKIN = 10
NUM_CLASSES = 20


class PeelError(Exception):
    """Base class for every error raised by the package."""


class PointBehindCamera(PeelError):
    pass


class NonPositiveDepth(PeelError):
    pass


class InvalidStack(PeelError):
    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:3])
        super().__init__(f"{len(self.violations)} stack violation(s): {head}")


class DimensionMismatch(PeelError):
    pass


class EmptyInput(PeelError):
    pass


@dataclass(frozen=True, eq=False)
class PinholeCamera:
    """Pinhole camera with a rigid world-to-camera pose.

    ``rotation`` and ``translation`` map world points into camera space:
    ``Xc = R @ Xw + t``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    znear: float = 1e-3

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if not self.znear > 0:
            raise ValueError("znear must be positive")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or abs(np.linalg.det(R) - 1.0) >= 1e-9:
            raise ValueError("rotation must be orthonormal with det 1")

    def __eq__(self, other):
        if not isinstance(other, PinholeCamera):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def from_fov(cls, width, height, hfov_deg, eye=(0.0, 0.0, -2.0), znear=1e-3):
        """Camera at ``eye`` looking down +z with horizontal field of view ``hfov_deg``."""
        f = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
        eye = np.asarray(eye, dtype=np.float64)
        return cls(width, height, f, f, width / 2.0, height / 2.0,
                   np.eye(3), -eye, znear)

    @property
    def hfov(self) -> float:
        return 2.0 * np.arctan(self.width / (2.0 * self.fx))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def footprint(self, depth):
        """Lateral size of one pixel at ``depth``: depth * 2 tan(hfov/2) / W."""
        return np.asarray(depth) * 2.0 * np.tan(self.hfov / 2.0) / self.width

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def to_dict(self) -> dict:
        return {
            "width": int(self.width), "height": int(self.height),
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "znear": float(self.znear),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PinholeCamera":
        return cls(int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
                   float(d["cx"]), float(d["cy"]), np.array(d["rotation"], dtype=np.float64),
                   np.array(d["translation"], dtype=np.float64), float(d.get("znear", 1e-3)))


def project(camera: PinholeCamera, points):
    """Project world points to continuous pixel coordinates.

    Returns ``(pixels, depth)``; works on a single 3-vector or an (N, 3) array.
    Raises PointBehindCamera if any point has camera-space Z below ``znear``.
    """
    pc = camera.to_camera(points)
    z = pc[..., 2]
    if np.any(z < camera.znear):
        raise PointBehindCamera(f"camera-space z={np.min(z):g} below znear={camera.znear:g}")
    x = camera.fx * (pc[..., 0] / z) + camera.cx
    y = camera.fy * (pc[..., 1] / z) + camera.cy
    return np.stack([x, y], axis=-1), z


def unproject_camera(camera: PinholeCamera, pixels, depth) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise NonPositiveDepth("depth must be positive")
    x = (pixels[..., 0] - camera.cx) / camera.fx * depth
    y = (pixels[..., 1] - camera.cy) / camera.fy * depth
    return np.stack([x, y, depth * np.ones_like(x)], axis=-1)


def unproject(camera: PinholeCamera, pixels, depth) -> np.ndarray:
    """Inverse of :func:`project`: pixel coordinates plus camera Z to world points."""
    return camera.to_world(unproject_camera(camera, pixels, depth))


@dataclass(frozen=True)
class PeelStack:
    """L pixel-aligned peel layers: depth (L,H,W), rgb (L,H,W,3), seg (L,H,W), normal (L,H,W,3).

    Depth 0.0, seg 0 and normal (0,0,0) mark background texels.  Normals are
    camera-space unit vectors.
    """

    camera: PinholeCamera
    depth: np.ndarray
    rgb: np.ndarray
    seg: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        depth = np.ascontiguousarray(self.depth, dtype=np.float32)
        rgb = np.ascontiguousarray(self.rgb, dtype=np.uint8)
        seg = np.ascontiguousarray(self.seg, dtype=np.uint8)
        normal = np.ascontiguousarray(self.normal, dtype=np.float32)
        L, H, W = depth.shape
        if rgb.shape != (L, H, W, 3) or seg.shape != (L, H, W) or normal.shape != (L, H, W, 3):
            raise DimensionMismatch("peel channels are not pixel-aligned")
        if (H, W) != (self.camera.height, self.camera.width):
            raise DimensionMismatch("peel layers do not match the camera resolution")
        if not 1 <= L <= MAX_LAYERS:
            raise ValueError(f"layer count must be in [1, {MAX_LAYERS}]")
        for name, arr in (("depth", depth), ("rgb", rgb), ("seg", seg), ("normal", normal)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def layers(self) -> int:
        return self.depth.shape[0]

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def replace(self, **channels) -> "PeelStack":
        kw = dict(camera=self.camera, depth=self.depth, rgb=self.rgb, seg=self.seg,
                  normal=self.normal)
        kw.update(channels)
        return PeelStack(**kw)

    @classmethod
    def empty(cls, camera: PinholeCamera, layers: int = DEFAULT_LAYERS) -> "PeelStack":
        H, W = camera.height, camera.width
        return cls(camera, np.zeros((layers, H, W), np.float32),
                   np.zeros((layers, H, W, 3), np.uint8), np.zeros((layers, H, W), np.uint8),
                   np.zeros((layers, H, W, 3), np.float32))


@dataclass(frozen=True)
class Violation:
    rule: str
    layer: int  # 1-based
    x: int
    y: int

    def __str__(self):
        return f"{self.rule} at layer {self.layer} pixel ({self.x}, {self.y})"


def validate_stack(stack: PeelStack) -> List[Violation]:
    """Check the per-texel PeelStack invariants and return every violation found."""
    out = []
    depth = stack.depth.astype(np.float64)
    valid = depth > 0
    seg_valid = stack.seg > 0
    nrm = stack.normal.astype(np.float64)
    nlen = np.linalg.norm(nrm, axis=-1)
    nrm_valid = np.any(nrm != 0, axis=-1)

    def emit(rule, mask):
        for l, y, x in np.argwhere(mask):
            out.append(Violation(rule, int(l) + 1, int(x), int(y)))

    emit("negative_depth", depth < 0)
    emit("coherence", (valid != seg_valid) | (valid != nrm_valid))
    emit("normal_length", valid & nrm_valid & (np.abs(nlen - 1.0) >= 1e-4))
    # Valid depths must strictly increase over the valid layers at each pixel.
    # Checked between consecutive valid entries, so holes do not hide faults.
    big = np.where(valid, depth, np.inf)
    running = np.full(depth.shape[1:], -np.inf)
    mono = np.zeros_like(valid)
    for l in range(depth.shape[0]):
        bad = valid[l] & (depth[l] <= running)
        mono[l] = bad
        running = np.where(valid[l], np.maximum(running, big[l]), running)
    emit("monotonicity", mono)
    return out


@dataclass
class TriMesh:
    """Triangle mesh with optional per-vertex normals, per-face labels and colors, and uvs.

    ``uv`` holds texture coordinates; ``face_uv`` indexes into ``uv`` per face
    corner (OBJ style) and defaults to ``faces`` when uvs are per-vertex.
    ``texture`` is an (h, w, 3) uint8 image sampled with v pointing up.
    """

    vertices: np.ndarray
    faces: np.ndarray
    normals: Optional[np.ndarray] = None
    face_labels: Optional[np.ndarray] = None
    face_colors: Optional[np.ndarray] = None
    uv: Optional[np.ndarray] = None
    face_uv: Optional[np.ndarray] = None
    texture: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.vertices):
                raise ValueError("normals must be per-vertex")
            if len(self.normals) and np.abs(np.linalg.norm(self.normals, axis=1) - 1).max() >= 1e-4:
                raise ValueError("vertex normals must be unit length")
        if self.face_labels is not None:
            self.face_labels = np.asarray(self.face_labels, dtype=np.int64).reshape(-1)
            if len(self.face_labels) != len(self.faces):
                raise ValueError("face_labels must be per-face")
        if self.face_colors is not None:
            self.face_colors = np.asarray(self.face_colors, dtype=np.uint8).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if self.face_uv is None:
                if len(self.uv) != len(self.vertices):
                    raise ValueError("per-vertex uv count must match vertex count")
            else:
                self.face_uv = np.asarray(self.face_uv, dtype=np.int64).reshape(-1, 3)
        if self.texture is not None:
            self.texture = np.asarray(self.texture, dtype=np.uint8)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def corner_uv(self) -> Optional[np.ndarray]:
        """Per-corner uv of shape (F, 3, 2), or None."""
        if self.uv is None:
            return None
        idx = self.faces if self.face_uv is None else self.face_uv
        return self.uv[idx]

    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        ln = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(ln > 0, ln, 1.0)

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def diameter(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def submesh(self, face_mask) -> "TriMesh":
        """Faces selected by ``face_mask`` with unused vertices dropped (attributes kept)."""
        faces = self.faces[face_mask]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, np.int64)
        remap[used] = np.arange(len(used))
        return TriMesh(
            self.vertices[used], remap[faces],
            None if self.normals is None else self.normals[used],
            None if self.face_labels is None else self.face_labels[face_mask],
            None if self.face_colors is None else self.face_colors[face_mask],
            None if self.uv is None or self.face_uv is not None else self.uv[used],
            None, self.texture,
        )


def concat_meshes(meshes: Sequence[TriMesh]) -> TriMesh:
    """Concatenate meshes; optional attributes are kept only if every mesh has them."""
    verts, faces, labels, colors = [], [], [], []
    off = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += m.n_vertices
        labels.append(m.face_labels)
        colors.append(m.face_colors)
    return TriMesh(
        np.concatenate(verts) if verts else np.zeros((0, 3)),
        np.concatenate(faces) if faces else np.zeros((0, 3), np.int64),
        face_labels=None if any(x is None for x in labels) else np.concatenate(labels),
        face_colors=None if any(x is None for x in colors) else np.concatenate(colors),
    )


@dataclass
class LabeledPointCloud:
    points: np.ndarray
    normals: np.ndarray
    labels: np.ndarray
    layer_ids: np.ndarray
    source_pixel: np.ndarray  # (N, 3) rows of (layer, x, y), layer 1-based

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.layer_ids = np.asarray(self.layer_ids, dtype=np.int64).reshape(-1)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 3)
        n = len(self.points)
        if not all(len(a) == n for a in (self.normals, self.labels, self.layer_ids,
                                         self.source_pixel)):
            raise ValueError("point cloud arrays must have equal length")
        if n and (self.labels.min() <= 0 or self.layer_ids.min() < 1):
            raise ValueError("labels must be > 0 and layer ids >= 1")

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points[mask], self.normals[mask], self.labels[mask],
                                 self.layer_ids[mask], self.source_pixel[mask])


@dataclass
class LayeredMesh:
    """Mesh whose vertices remember the peel layer they came from (FILL for stitched ones)."""

    mesh: TriMesh
    vertex_layer: np.ndarray
    vertex_source: Optional[np.ndarray] = None  # (N, 3) rows (layer, x, y); -1 rows for FILL

    def __post_init__(self):
        self.vertex_layer = np.asarray(self.vertex_layer, dtype=np.int64).reshape(-1)
        if len(self.vertex_layer) != self.mesh.n_vertices:
            raise ValueError("vertex_layer length must equal vertex count")
        if self.vertex_source is not None:
            self.vertex_source = np.asarray(self.vertex_source, dtype=np.int64).reshape(-1, 3)
            if len(self.vertex_source) != self.mesh.n_vertices:
                raise ValueError("vertex_source length must equal vertex count")
