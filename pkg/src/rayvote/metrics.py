"""Geometric quality metrics for aggregated clouds, measured against an analytic scene."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence

import numpy as np

from .aggregation import (
    DaConfig,
    FeaturePointCloud,
    RmaConfig,
    da_aggregate,
    rma_aggregate,
    va_aggregate,
    volume_to_cloud,
)
from .geometry import CameraView
from .tsdf import Scene, TsdfGrid, render_depth

SURFACE_EPS_VOXELS = 3.0
ORACLE_T_MAX = 1e3


@dataclass(frozen=True)
class AggregationReport:
    scheme: str
    points: int
    total_weight: float
    surface_mass: float
    occlusion_leakage: Optional[float]
    mean_surface_distance: float

    def as_dict(self) -> dict:
        return asdict(self)


def surface_mass(cloud: FeaturePointCloud, scene: Scene, eps: float) -> float:
    """Fraction of cloud weight lying within ``eps`` of the scene surface."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    total = cloud.weights.sum()
    if len(cloud) == 0 or total <= 0:
        return 0.0
    near = np.abs(scene.sdf(cloud.points)) < eps
    return float(cloud.weights[near].sum() / total)


def mean_surface_distance(cloud: FeaturePointCloud, scene: Scene) -> float:
    if len(cloud) == 0:
        return 0.0
    d = np.abs(scene.sdf(cloud.points))
    return float(np.sum(cloud.weights * d) / cloud.weights.sum())


def oracle_depths(scene: Scene, views: Sequence[CameraView], t_max: float = ORACLE_T_MAX) -> List[np.ndarray]:
    return [render_depth(scene, v, t_max) for v in views]


def occlusion_leakage(cloud: FeaturePointCloud, scene: Scene, views: Sequence[CameraView], margin: float,
                      depths: Optional[List[np.ndarray]] = None) -> float:
    """Fraction of weight placed more than ``margin`` beyond the first surface along its source ray."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    if not cloud.has_provenance:
        raise ValueError("occlusion_leakage needs a cloud with ray provenance (RMA or DA)")
    total = cloud.weights.sum()
    if len(cloud) == 0 or total <= 0:
        return 0.0
    if depths is None:
        depths = oracle_depths(scene, views)
    first_hit = np.empty(len(cloud))
    for vi, depth in enumerate(depths):
        sel = cloud.view_ids == vi
        px = cloud.pixels[sel]
        first_hit[sel] = depth[px[:, 1], px[:, 0]]
    beyond = cloud.ray_t > first_hit + margin
    return float(cloud.weights[beyond].sum() / total)


def report(scheme: str, cloud: FeaturePointCloud, scene: Scene, views, eps: float, margin: float,
           depths=None) -> AggregationReport:
    leak = occlusion_leakage(cloud, scene, views, margin, depths) if cloud.has_provenance else None
    return AggregationReport(
        scheme=scheme,
        points=len(cloud),
        total_weight=cloud.total_weight,
        surface_mass=surface_mass(cloud, scene, eps),
        occlusion_leakage=leak,
        mean_surface_distance=mean_surface_distance(cloud, scene),
    )


def compare_schemes(scene: Scene, grid: TsdfGrid, views: Sequence[CameraView], rma_cfg: RmaConfig = RmaConfig(),
                    da_cfg: DaConfig = DaConfig(), va_dims=None, va_band: float = np.inf,
                    schemes: Sequence[str] = ("rma", "da", "va"), eps: Optional[float] = None,
                    margin: Optional[float] = None, workers: int = 1) -> List[AggregationReport]:
    """Run the requested schemes on one scene and report each against the oracle.

    VA lifts onto the TSDF grid's lattice (or ``va_dims`` voxels from the same
    origin) and by default keeps every observed voxel (``va_band=inf``).
    """
    eps = SURFACE_EPS_VOXELS * grid.voxel_size if eps is None else eps
    margin = 2 * grid.truncation if margin is None else margin
    depths = oracle_depths(scene, views)
    out = []
    for scheme in schemes:
        if scheme == "rma":
            cloud = rma_aggregate(grid, views, rma_cfg, workers=workers)
        elif scheme == "da":
            cloud = da_aggregate(grid, views, da_cfg, workers=workers)
        elif scheme == "va":
            vol = va_aggregate(views, va_dims or grid.dims, grid.origin, grid.voxel_size, workers=workers)
            cloud = volume_to_cloud(vol, grid, va_band)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        out.append(report(scheme, cloud, scene, views, eps, margin, depths))
    return out
