"""TSDF voxel grids, analytic signed-distance scenes and a sphere-tracing depth oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .geometry import CameraView, pixel_grid_directions

DEFAULT_VOXEL_SIZE = 0.04
TRUNCATION_VOXELS = 3.0
HIT_EPS = 1e-5
MAX_TRACE_STEPS = 4096


# ---------------------------------------------------------------------------
# Analytic scenes. Signed distance is negative inside solid.
# ---------------------------------------------------------------------------


class Scene:
    def sdf(self, points) -> np.ndarray:
        raise NotImplementedError

    def __or__(self, other: "Scene") -> "Union":
        return Union((self, other))

    def __and__(self, other: "Scene") -> "Intersection":
        return Intersection((self, other))


@dataclass(frozen=True)
class HalfSpace(Scene):
    """Solid where ``normal . x < offset``."""

    normal: Tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("half-space normal must be non-zero")
        object.__setattr__(self, "normal", tuple(float(x) for x in n / norm))
        object.__setattr__(self, "offset", float(self.offset))

    def sdf(self, points):
        return np.asarray(points, dtype=np.float64) @ np.asarray(self.normal) - self.offset

    def to_dict(self):
        return {"type": "halfspace", "normal": list(self.normal), "offset": self.offset}


@dataclass(frozen=True)
class Sphere(Scene):
    center: Tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        object.__setattr__(self, "radius", float(self.radius))

    def sdf(self, points):
        d = np.asarray(points, dtype=np.float64) - np.asarray(self.center)
        return np.linalg.norm(d, axis=-1) - self.radius

    def to_dict(self):
        return {"type": "sphere", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Box(Scene):
    """Axis-aligned solid box between ``min`` and ``max`` corners."""

    min: Tuple[float, float, float]
    max: Tuple[float, float, float]

    def __post_init__(self):
        lo = tuple(float(x) for x in self.min)
        hi = tuple(float(x) for x in self.max)
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"box min {lo} must be below max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        center, half = (lo + hi) / 2, (hi - lo) / 2
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def to_dict(self):
        return {"type": "box", "min": list(self.min), "max": list(self.max)}


@dataclass(frozen=True)
class Union(Scene):
    children: Tuple[Scene, ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("union needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))

    def sdf(self, points):
        return np.min([c.sdf(points) for c in self.children], axis=0)

    def to_dict(self):
        return {"type": "union", "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class Intersection(Scene):
    children: Tuple[Scene, ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("intersection needs at least one child")
        object.__setattr__(self, "children", tuple(self.children))

    def sdf(self, points):
        return np.max([c.sdf(points) for c in self.children], axis=0)

    def to_dict(self):
        return {"type": "intersection", "children": [c.to_dict() for c in self.children]}


@dataclass(frozen=True)
class Empty(Scene):
    """Scene with no solid anywhere; distance is a large positive constant."""

    distance: float = 1e6

    def sdf(self, points):
        return np.full(np.asarray(points).shape[:-1], self.distance)

    def to_dict(self):
        return {"type": "empty"}


def scene_from_dict(d: dict) -> Scene:
    kind = d.get("type")
    if kind == "halfspace":
        return HalfSpace(tuple(d["normal"]), d["offset"])
    if kind == "sphere":
        return Sphere(tuple(d["center"]), d["radius"])
    if kind == "box":
        return Box(tuple(d["min"]), tuple(d["max"]))
    if kind == "union":
        return Union(tuple(scene_from_dict(c) for c in d["children"]))
    if kind == "intersection":
        return Intersection(tuple(scene_from_dict(c) for c in d["children"]))
    if kind == "empty":
        return Empty()
    raise ValueError(f"unknown scene node type {kind!r}")


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TsdfGrid:
    """Dense TSDF. ``values[i, j, k]`` is the voxel centered at ``origin + (i, j, k) * voxel_size``.

    Values are float32; serialized order is x fastest (``values.ravel(order="F")``).
    """

    values: np.ndarray
    origin: Tuple[float, float, float]
    voxel_size: float
    truncation: float

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size}")
        if not self.truncation > 0:
            raise ValueError(f"truncation must be positive, got {self.truncation}")
        values = np.array(self.values, dtype=np.float32)
        if values.ndim != 3 or min(values.shape) < 1:
            raise ValueError(f"values must be a non-empty (W, H, D) array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("TSDF values must be finite")
        # float32 storage of truncation-clamped values may round just past the float64 bound
        bound = float(np.float32(self.truncation)) * (1 + 1e-6)
        if np.abs(values).max() > bound:
            raise ValueError(f"TSDF values exceed truncation {self.truncation}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "origin", tuple(float(x) for x in np.asarray(self.origin).reshape(3)))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "truncation", float(self.truncation))

    @property
    def free_value(self) -> float:
        """Value reported outside the grid: ``+truncation`` rounded like stored voxels."""
        return float(np.float32(self.truncation))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(self.values.shape)

    @property
    def diagonal(self) -> float:
        return self.voxel_size * float(np.linalg.norm(self.dims))

    @property
    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        """Half-open axis-aligned box covered by the voxels."""
        origin = np.asarray(self.origin)
        lo = origin - self.voxel_size / 2
        hi = origin + (np.asarray(self.dims) - 0.5) * self.voxel_size
        return lo, hi

    def voxel_centers(self) -> np.ndarray:
        """Centers of all voxels, shape ``(W, H, D, 3)``."""
        return voxel_centers(self.dims, self.origin, self.voxel_size)

    def query(self, points, mode: str = "nearest") -> np.ndarray:
        if mode == "nearest":
            return query_nearest(self, points)
        if mode == "trilinear":
            return query_trilinear(self, points)
        raise ValueError(f"unknown TSDF lookup mode {mode!r}")


def voxel_centers(dims, origin, voxel_size) -> np.ndarray:
    axes = [np.arange(n, dtype=np.float64) * voxel_size + o for n, o in zip(dims, origin)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def default_truncation(voxel_size: float) -> float:
    return TRUNCATION_VOXELS * voxel_size


def bake(scene: Scene, dims, origin, voxel_size: float = DEFAULT_VOXEL_SIZE, truncation=None) -> TsdfGrid:
    """Sample ``scene`` at every voxel center and clamp to ``[-truncation, truncation]``."""
    if truncation is None:
        truncation = default_truncation(voxel_size)
    if not voxel_size > 0 or not truncation > 0:
        raise ValueError("voxel_size and truncation must be positive")
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive counts, got {dims}")
    d = scene.sdf(voxel_centers(dims, origin, voxel_size))
    tau32 = np.float32(truncation)
    values = np.clip(d.astype(np.float32), -tau32, tau32)
    return TsdfGrid(values, origin, voxel_size, truncation)


def _grid_index(grid: TsdfGrid, points):
    p = np.asarray(points, dtype=np.float64)
    return (p - np.asarray(grid.origin)) / grid.voxel_size


def query_nearest(grid: TsdfGrid, points) -> np.ndarray:
    """Value of the voxel whose center is closest to each point; ``+truncation`` outside the grid."""
    idx = np.floor(_grid_index(grid, points) + 0.5)
    dims = np.asarray(grid.dims)
    inside = np.all((idx >= 0) & (idx < dims), axis=-1)
    idx = np.where(inside[..., None], idx, 0).astype(np.intp)
    vals = grid.values[idx[..., 0], idx[..., 1], idx[..., 2]].astype(np.float64)
    return np.where(inside, vals, grid.free_value)


def query_trilinear(grid: TsdfGrid, points) -> np.ndarray:
    """Trilinear interpolation between voxel centers, clamped at the border voxels."""
    f = _grid_index(grid, points)
    dims = np.asarray(grid.dims)
    inside = np.all((f >= -0.5) & (f < dims - 0.5), axis=-1)
    f = np.clip(np.where(inside[..., None], f, 0.0), 0, dims - 1)
    i0 = np.minimum(np.floor(f), np.maximum(dims - 2, 0)).astype(np.intp)
    i1 = np.minimum(i0 + 1, dims - 1)
    w = f - i0
    vals = grid.values.astype(np.float64)
    out = np.zeros(f.shape[:-1])
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ix = i1[..., 0] if cx else i0[..., 0]
                iy = i1[..., 1] if cy else i0[..., 1]
                iz = i1[..., 2] if cz else i0[..., 2]
                wx = w[..., 0] if cx else 1 - w[..., 0]
                wy = w[..., 1] if cy else 1 - w[..., 1]
                wz = w[..., 2] if cz else 1 - w[..., 2]
                out += wx * wy * wz * vals[ix, iy, iz]
    return np.where(inside, out, grid.free_value)


# ---------------------------------------------------------------------------
# Sphere tracing
# ---------------------------------------------------------------------------


def sphere_trace(scene: Scene, origins, directions, t_max: float, eps: float = HIT_EPS,
                 max_steps: int = MAX_TRACE_STEPS) -> np.ndarray:
    """First-hit distance along each ray, ``inf`` for misses.

    Rays that neither hit nor leave ``[0, t_max]`` within ``max_steps`` are
    reported as misses.
    """
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    directions = np.asarray(directions, dtype=np.float64)
    shape = directions.shape[:-1]
    dirs = directions.reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape).reshape(-1, 3)
    t = np.zeros(len(dirs))
    result = np.full(len(dirs), np.inf)
    active = np.arange(len(dirs))
    for _ in range(max_steps):
        if active.size == 0:
            break
        d = scene.sdf(origins[active] + t[active, None] * dirs[active])
        hit = d < eps
        result[active[hit]] = t[active[hit]]
        t[active] += d
        keep = ~hit & (t[active] <= t_max)
        active = active[keep]
    return result.reshape(shape)


def render_depth(scene: Scene, view: CameraView, t_max: float) -> np.ndarray:
    """Per-pixel distance along the pixel ray to the first surface (``inf`` on miss)."""
    return sphere_trace(scene, view.center, pixel_grid_directions(view), t_max)
