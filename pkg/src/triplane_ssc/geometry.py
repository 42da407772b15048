"""Camera model, voxel lattice transforms and sinusoidal positional embeddings.

World frame: x forward, y left, z up. Camera frame: x right, y down, z forward.
The camera sits on the grid's ``x = min`` face looking along world +x.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# camera axes expressed in world coordinates (columns): right -> -y, down -> -z, forward -> +x
FORWARD_ROTATION = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self):
        return {k: getattr(self, k) for k in ("fx", "fy", "cx", "cy", "width", "height")}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraPose:
    """Rigid camera-to-world transform; the rotation defaults to forward-facing."""

    position: tuple = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(default_factory=lambda: FORWARD_ROTATION.copy(), compare=False)

    def cam_to_world(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + np.asarray(self.position)

    def world_to_cam(self, points):
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.position)) @ self.rotation

    def to_dict(self):
        return {"position": [float(v) for v in self.position], "rotation": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(v) for v in d["position"]), np.asarray(d["rotation"], dtype=np.float64))


@dataclass(frozen=True)
class GridSpec:
    extents: tuple
    world_min: tuple
    world_max: tuple

    def __post_init__(self):
        ext = np.asarray(self.extents)
        if ext.shape != (3,) or np.any(ext < 1):
            raise ValueError(f"extents must be three positive counts, got {self.extents}")
        if np.any(np.asarray(self.world_max) <= np.asarray(self.world_min)):
            raise ValueError("world_max must exceed world_min on every axis")

    @property
    def shape(self):
        return tuple(int(e) for e in self.extents)

    @property
    def voxel_size(self):
        return (np.asarray(self.world_max, dtype=np.float64) - np.asarray(self.world_min)) / np.asarray(self.extents)

    @property
    def num_voxels(self):
        return int(np.prod(self.extents))

    def scaled(self, factor):
        """Same world box with ``factor`` times as many voxels per axis."""
        return GridSpec(tuple(int(e * factor) for e in self.extents), self.world_min, self.world_max)

    def coarsened(self, factor):
        ext = np.asarray(self.extents)
        if np.any(ext % factor):
            raise ValueError(f"extents {self.extents} not divisible by {factor}")
        return GridSpec(tuple(int(e // factor) for e in ext), self.world_min, self.world_max)

    def to_dict(self):
        return {
            "extents": [int(e) for e in self.extents],
            "world_min": [float(v) for v in self.world_min],
            "world_max": [float(v) for v in self.world_max],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["extents"]), tuple(d["world_min"]), tuple(d["world_max"]))


PAPER_STAGE2_GRID = GridSpec((256, 256, 32), (0.0, -25.6, -2.0), (51.2, 25.6, 4.4))
PAPER_STAGE1_GRID = GridSpec((128, 128, 16), (0.0, -25.6, -2.0), (51.2, 25.6, 4.4))


def pixel_to_point(u, v, depth, cam):
    """Back-project pixel coordinates at metric depth into the camera frame."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (u - cam.cx) * depth / cam.fx
    y = (v - cam.cy) * depth / cam.fy
    return np.stack([x, y, depth], axis=-1)


def project_point_to_image(points, cam):
    """Pinhole projection. Returns ``(u, v, in_view)``; points with z <= 0 map to (-1, -1)."""
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    front = z > 0
    safe_z = np.where(front, z, 1.0)
    u = np.where(front, cam.fx * p[..., 0] / safe_z + cam.cx, -1.0)
    v = np.where(front, cam.fy * p[..., 1] / safe_z + cam.cy, -1.0)
    in_view = front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, in_view


def world_to_voxel(points, spec):
    """Half-open voxel lookup. Returns ``(index [..., 3], in_range [...])``."""
    p = np.asarray(points, dtype=np.float64)
    idx = np.floor((p - np.asarray(spec.world_min)) / spec.voxel_size).astype(np.int64)
    in_range = np.all((idx >= 0) & (idx < np.asarray(spec.extents)), axis=-1)
    return idx, in_range


def voxel_center(index, spec):
    return np.asarray(spec.world_min) + (np.asarray(index, dtype=np.float64) + 0.5) * spec.voxel_size


def normalized_position(index, extents):
    """Voxel index -> normalized center in [0, 1)^3."""
    return (np.asarray(index, dtype=np.float64) + 0.5) / np.asarray(extents, dtype=np.float64)


def lattice_indices(extents):
    """All voxel indices of a lattice in x-major order, shape ``[prod(extents), 3]``."""
    grids = np.meshgrid(*[np.arange(e) for e in extents], indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1).astype(np.int64)


def embedding_frequencies(dim, max_ratio=8.0):
    if dim <= 0 or dim % 6:
        raise ValueError(f"positional embedding dim must be a positive multiple of 6, got {dim}")
    n = dim // 6
    return np.pi * np.geomspace(1.0, max_ratio, n) if n > 1 else np.array([np.pi])


def positional_embedding(p_hat, dim):
    """Sinusoidal embedding of normalized 3-vectors ``[..., 3] -> [..., dim]``.

    Channel ``6j + 2a`` holds ``sin(w_j p_a)`` and ``6j + 2a + 1`` holds
    ``cos(w_j p_a)``, with ``w_j`` geometrically spaced from pi to 8 pi.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    freqs = embedding_frequencies(dim)
    angles = p_hat[..., None, :] * freqs[:, None]  # [..., F, 3]
    out = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # [..., F, 3, 2]
    return out.reshape(*p_hat.shape[:-1], dim)


def scale_to_feature_plane(uv_norm, h, w):
    """Normalized image coordinates ``(u/W, v/H)`` -> fractional ``(row, col)`` on an h x w map."""
    if h < 1 or w < 1:
        raise ValueError("feature plane extents must be >= 1")
    uv = np.asarray(uv_norm, dtype=np.float64)
    return np.stack([uv[..., 1] * h, uv[..., 0] * w], axis=-1)


def project_world_to_feature_plane(points_world, cam, pose, h, w):
    """World points -> (fractional feature-plane coords ``[N, 2]``, in-view flags ``[N]``)."""
    pc = pose.world_to_cam(points_world)
    u, v, in_view = project_point_to_image(pc, cam)
    uv_norm = np.stack([u / cam.width, v / cam.height], axis=-1)
    coords = scale_to_feature_plane(uv_norm, h, w)
    return np.where(in_view[:, None], coords, -1.0), in_view
