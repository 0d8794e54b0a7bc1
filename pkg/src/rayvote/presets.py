"""Synthetic test scenes: analytic geometry, camera rigs and seeded smooth feature maps.

Every preset is laid out relative to the grid extent ``[0, dims * voxel_size]``
so that any grid size gives a sensible scene. The grid origin (center of
voxel ``(0, 0, 0)``) sits at ``voxel_size / 2`` on each axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, CameraView, FeatureMap
from .tsdf import Box, Empty, HalfSpace, Scene, Sphere, TsdfGrid, Union, bake, default_truncation

PRESETS = ("plane", "two-walls", "box-room", "sphere-clutter", "empty")
FAR = 1e3


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    name: str
    scene: Scene
    grid: TsdfGrid
    cameras: List[Tuple[CameraIntrinsics, CameraPose]]
    feature_maps: List[FeatureMap]

    @property
    def views(self) -> List[CameraView]:
        return [CameraView(k, p, f) for (k, p), f in zip(self.cameras, self.feature_maps)]


def default_intrinsics(width: int, height: int) -> CameraIntrinsics:
    f = 0.9 * width
    return CameraIntrinsics(f, f, width / 2, height / 2, width, height)


def slab(axis: int, lo: float, hi: float) -> Box:
    """Box that is bounded only along ``axis``."""
    bmin, bmax = [-FAR] * 3, [FAR] * 3
    bmin[axis], bmax[axis] = lo, hi
    return Box(tuple(bmin), tuple(bmax))


def wall_thickness(voxel_size: float) -> float:
    return 2 * default_truncation(voxel_size) + 2 * voxel_size


def build_scene(name: str, extent, voxel_size: float, seed: int = 0) -> Scene:
    lx, ly, lz = extent
    if name == "plane":
        return HalfSpace((0.0, 0.0, 1.0), 0.25 * lz)
    if name == "two-walls":
        th = wall_thickness(voxel_size)
        return Union((slab(0, 0.5 * lx, 0.5 * lx + th), slab(0, 0.8 * lx, 0.8 * lx + th)))
    if name == "box-room":
        x0, x1, y0, y1, z0, z1 = 0.1 * lx, 0.9 * lx, 0.1 * ly, 0.9 * ly, 0.1 * lz, 0.9 * lz
        walls = (
            HalfSpace((1, 0, 0), x0), HalfSpace((-1, 0, 0), -x1),
            HalfSpace((0, 1, 0), y0), HalfSpace((0, -1, 0), -y1),
            HalfSpace((0, 0, 1), z0), HalfSpace((0, 0, -1), -z1),
        )
        table = Box((0.4 * lx, 0.4 * ly, z0), (0.6 * lx, 0.6 * ly, z0 + 0.3 * (z1 - z0)))
        return Union(walls + (table,))
    if name == "sphere-clutter":
        floor = 0.2 * lz
        rng = np.random.default_rng([seed, 7919])
        spheres = []
        for _ in range(5):
            r = rng.uniform(0.08, 0.16) * min(lx, ly)
            cx, cy = rng.uniform(0.3, 0.7, 2) * (lx, ly)
            spheres.append(Sphere((cx, cy, floor + 0.5 * r), r))
        return Union((HalfSpace((0, 0, 1), floor),) + tuple(spheres))
    if name == "empty":
        return Empty()
    raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


def camera_rig(name: str, extent, count: int, width: int, height: int) -> List[Tuple[CameraIntrinsics, CameraPose]]:
    """Deterministic camera placements suited to each preset."""
    if count < 1:
        raise ValueError("need at least one view")
    lx, ly, lz = extent
    center = np.array([lx / 2, ly / 2, lz / 2])
    k = default_intrinsics(width, height)
    cams = []
    for i in range(count):
        a = 2 * np.pi * i / count
        if name == "two-walls":
            frac = (i + 0.5) / count
            eye = np.array([0.12 * lx, (0.35 + 0.3 * frac) * ly, (0.4 + 0.2 * np.sin(a)) * lz])
            target = np.array([0.5 * lx, eye[1] + 0.05 * ly * np.cos(a), eye[2]])
        elif name == "box-room":
            eye = center + np.array([0.15 * lx * np.cos(a), 0.15 * ly * np.sin(a), 0.1 * lz])
            target = center + np.array([0.4 * lx * np.cos(a + 0.5), 0.4 * ly * np.sin(a + 0.5), -0.2 * lz])
        else:
            eye = np.array([lx / 2 + 0.2 * min(lx, ly) * np.cos(a), ly / 2 + 0.2 * min(lx, ly) * np.sin(a),
                            0.85 * lz])
            target = np.array([lx / 2, ly / 2, 0.25 * lz])
        cams.append((k, CameraPose.look_at(eye, target)))
    return cams


def smooth_feature_map(height: int, width: int, channels: int, rng: np.random.Generator,
                       waves: int = 4) -> FeatureMap:
    """Per-channel sum of a few random low-frequency plane waves."""
    vv, uu = np.meshgrid(np.arange(height) / height, np.arange(width) / width, indexing="ij")
    data = np.zeros((height, width, channels))
    for c in range(channels):
        for _ in range(waves):
            fu, fv = rng.uniform(-3, 3, 2)
            amp = rng.uniform(0.2, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            data[:, :, c] += amp * np.sin(2 * np.pi * (fu * uu + fv * vv) + phase)
    return FeatureMap(data.astype(np.float32))


def synthesize(preset: str, views: int = 8, dims=(64, 64, 32), voxel_size: float = 0.04,
               image=(64, 64), channels: int = 8, seed: int = 0, truncation=None) -> SyntheticScene:
    if not voxel_size > 0:
        raise ValueError("voxel size must be positive")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive integers, got {dims}")
    width, height = (int(x) for x in image)
    if channels < 1:
        raise ValueError("channels must be >= 1")
    extent = tuple(d * voxel_size for d in dims)
    scene = build_scene(preset, extent, voxel_size, seed)
    origin = (voxel_size / 2,) * 3
    grid = bake(scene, dims, origin, voxel_size, truncation)
    cams = camera_rig(preset, extent, views, width, height)
    maps = [smooth_feature_map(height, width, channels, np.random.default_rng([seed, i])) for i in range(views)]
    return SyntheticScene(preset, scene, grid, cams, maps)
