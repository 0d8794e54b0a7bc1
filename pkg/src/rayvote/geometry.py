"""Pinhole camera model, pixel rays, projection and feature sampling.

Conventions used throughout the package:

* Camera frame is x right, y down, z forward (OpenCV style).
* ``CameraPose`` is camera-to-world: ``x_world = R @ x_cam + t`` where ``t`` is
  the camera center.
* Pixel ``(u, v)`` (column, row) has its center at continuous image
  coordinate ``(u + 0.5, v + 0.5)``; ``cx``/``cy`` are given in continuous
  coordinates. ``project`` therefore returns ``u = fx * x / z + cx - 0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

NEAREST = "nearest"
BILINEAR = "bilinear"
SAMPLING_MODES = (NEAREST, BILINEAR)

BEHIND_EPS = 1e-6


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
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def check_rotation(rotation: np.ndarray, tol: float = 1e-6) -> None:
    """Raise ``ValueError`` unless ``rotation`` is a proper 3x3 rotation within ``tol``."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got shape {rotation.shape}")
    if not np.all(np.isfinite(rotation)):
        raise ValueError("rotation contains non-finite entries")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g} > {tol:g})")
    det = np.linalg.det(rotation)
    if abs(det - 1.0) > tol:
        raise ValueError(f"rotation determinant is {det:.6g}, expected +1")


@dataclass(frozen=True, eq=False)
class CameraPose:
    """Camera-to-world rigid transform; ``translation`` is the camera center."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        check_rotation(rotation)
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        """Pose at ``eye`` with the optical axis pointing at ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        return cls(np.stack([right, down, forward], axis=1), eye)

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A ``height x width x channels`` float32 feature image (channels fastest)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be (H, W, C) with positive dims, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("feature map contains non-finite values")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    features: FeatureMap

    def __post_init__(self):
        if (self.features.height, self.features.width) != (self.intrinsics.height, self.intrinsics.width):
            raise ValueError(
                f"feature map {self.features.width}x{self.features.height} does not match "
                f"intrinsics {self.intrinsics.width}x{self.intrinsics.height}"
            )

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        origin = np.array(self.origin, dtype=np.float64).reshape(3)
        direction = np.array(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "direction", direction)

    def at(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


def pixel_directions(view: CameraView, u, v) -> np.ndarray:
    """Unit world-frame directions through pixel coordinates ``(u, v)`` (arrays broadcast)."""
    k = view.intrinsics
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u + 0.5 - k.cx) / k.fx
    y = (v + 0.5 - k.cy) / k.fy
    cam = np.stack(np.broadcast_arrays(x, y, np.ones_like(x)), axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    return cam @ view.pose.rotation.T


def pixel_grid_directions(view: CameraView) -> np.ndarray:
    """Directions for every integer pixel, shape ``(height, width, 3)``."""
    vv, uu = np.meshgrid(np.arange(view.height), np.arange(view.width), indexing="ij")
    return pixel_directions(view, uu, vv)


def pixel_ray(view: CameraView, u: float, v: float) -> Ray:
    if not (0 <= u < view.width and 0 <= v < view.height):
        raise ValueError(f"pixel ({u}, {v}) outside image {view.width}x{view.height}")
    return Ray(view.center, pixel_directions(view, u, v))


def project_points(view: CameraView, points) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(u, v, depth)``; ``u``/``v`` are NaN where behind."""
    cam = view.pose.world_to_camera(points)
    k = view.intrinsics
    depth = cam[..., 2]
    front = depth > BEHIND_EPS
    safe = np.where(front, depth, 1.0)
    u = np.where(front, k.fx * cam[..., 0] / safe + k.cx - 0.5, np.nan)
    v = np.where(front, k.fy * cam[..., 1] / safe + k.cy - 0.5, np.nan)
    return u, v, depth


def project(view: CameraView, point) -> Optional[Tuple[float, float, float]]:
    """Project a world point to ``(u, v, depth)``, or ``None`` if it is behind the camera."""
    u, v, depth = project_points(view, np.asarray(point, dtype=np.float64).reshape(1, 3))
    if not depth[0] > BEHIND_EPS:
        return None
    return float(u[0]), float(v[0]), float(depth[0])


def sample_features(fmap: FeatureMap, u, v, mode: str = NEAREST) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized feature lookup at pixel coordinates.

    Returns ``(values, valid)`` with ``values`` of shape ``(..., C)`` (zeros where
    invalid) and a boolean ``valid`` mask. NaN coordinates are invalid.

    Nearest covers the full pixel footprints ``[-0.5, width - 0.5)``; bilinear
    needs all four neighbours and covers ``[0, width - 1]``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    data = fmap.data
    h, w, c = data.shape
    if mode == NEAREST:
        iu = np.floor(u + 0.5)
        iv = np.floor(v + 0.5)
        valid = (iu >= 0) & (iu < w) & (iv >= 0) & (iv < h)
        iu = np.where(valid, iu, 0).astype(np.intp)
        iv = np.where(valid, iv, 0).astype(np.intp)
        values = data[iv, iu].astype(np.float64)
    elif mode == BILINEAR:
        valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
        us = np.where(valid, u, 0.0)
        vs = np.where(valid, v, 0.0)
        u0 = np.minimum(np.floor(us), max(w - 2, 0)).astype(np.intp)
        v0 = np.minimum(np.floor(vs), max(h - 2, 0)).astype(np.intp)
        u1 = np.minimum(u0 + 1, w - 1)
        v1 = np.minimum(v0 + 1, h - 1)
        fu = (us - u0)[..., None]
        fv = (vs - v0)[..., None]
        d = data.astype(np.float64)
        values = (
            d[v0, u0] * (1 - fu) * (1 - fv)
            + d[v0, u1] * fu * (1 - fv)
            + d[v1, u0] * (1 - fu) * fv
            + d[v1, u1] * fu * fv
        )
    else:
        raise ValueError(f"unknown sampling mode {mode!r}; expected one of {SAMPLING_MODES}")
    values = np.where(valid[..., None], values, 0.0)
    return values, valid


def sample_feature(fmap: FeatureMap, u: float, v: float, mode: str = NEAREST) -> Optional[np.ndarray]:
    """Feature vector at ``(u, v)``, or ``None`` when out of bounds."""
    values, valid = sample_features(fmap, np.array([u]), np.array([v]), mode)
    if not valid[0]:
        return None
    return values[0]
