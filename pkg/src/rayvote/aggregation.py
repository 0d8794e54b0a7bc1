"""Multi-view feature aggregation: ray marching (RMA), depth (DA) and volume (VA) schemes.

All three produce a :class:`FeaturePointCloud`. RMA and DA clouds carry ray
provenance (view index, pixel, distance along the ray) so that occlusion can be
audited against an oracle; VA clouds do not.

Work is split into independent chunks (rays for RMA/DA, voxels for VA) that
are evaluated on a thread pool and concatenated in task order, so outputs do
not depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import NEAREST, SAMPLING_MODES, CameraView, Ray, pixel_grid_directions, project_points, sample_features
from .tsdf import DEFAULT_VOXEL_SIZE, TsdfGrid, voxel_centers

AGGREGATION_VOXEL_SIZE = DEFAULT_VOXEL_SIZE
MERGE_VOXEL_SIZE = 0.01
RAY_CHUNK = 2048
VOXEL_CHUNK = 65536


@dataclass(frozen=True)
class RmaConfig:
    """Ray marching settings.

    ``t_max=None`` means "use the TSDF grid diagonal". ``feature_weight``
    selects what each retained point carries as its merge weight: the ray
    weight ``W`` (default) or the opacity ``alpha``; retention always uses
    ``W > weight_threshold``. ``sampling_mode`` is kept for parity with the
    other schemes: samples are fed the feature of their own pixel center,
    where nearest and bilinear lookups coincide.
    """

    samples_per_ray: int = 300
    t_max: Optional[float] = None
    weight_threshold: float = 0.05
    sigmoid_scale: float = 25.0
    sampling_mode: str = NEAREST
    tsdf_lookup: str = "nearest"
    feature_weight: str = "weight"

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if not 0 < self.weight_threshold < 1:
            raise ValueError("weight_threshold must lie in (0, 1)")
        if not self.sigmoid_scale > 0:
            raise ValueError("sigmoid_scale must be positive")
        if self.t_max is not None and not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")
        if self.tsdf_lookup not in ("nearest", "trilinear"):
            raise ValueError(f"unknown TSDF lookup {self.tsdf_lookup!r}")
        if self.feature_weight not in ("weight", "alpha"):
            raise ValueError(f"feature_weight must be 'weight' or 'alpha', got {self.feature_weight!r}")

    def resolve_t_max(self, grid: TsdfGrid) -> float:
        return grid.diagonal if self.t_max is None else float(self.t_max)


@dataclass(frozen=True)
class DaConfig:
    k: int = 1
    samples_per_ray: int = 300
    t_max: Optional[float] = None
    sampling_mode: str = NEAREST
    tsdf_lookup: str = "nearest"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")
        if self.t_max is not None and not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if self.sampling_mode not in SAMPLING_MODES:
            raise ValueError(f"unknown sampling mode {self.sampling_mode!r}")

    def resolve_t_max(self, grid: TsdfGrid) -> float:
        return grid.diagonal if self.t_max is None else float(self.t_max)


@dataclass(frozen=True, eq=False)
class RayProfile:
    """Samples along one ray (1-D arrays) or a batch of rays (arrays of shape ``(R, n)``)."""

    t: np.ndarray
    tsdf: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    weight: np.ndarray
    transmittance_end: np.ndarray

    def __len__(self):
        return self.t.shape[-1]


@dataclass(frozen=True, eq=False)
class FeaturePointCloud:
    points: np.ndarray
    weights: np.ndarray
    features: np.ndarray
    view_ids: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None
    ray_t: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.points)
        if self.points.shape != (n, 3) or self.weights.shape != (n,) or self.features.shape[0] != n:
            raise ValueError("points, weights and features must agree on the point count")
        if self.features.ndim != 2:
            raise ValueError("features must be (N, C)")
        if n and not self.weights.min() > 0:
            raise ValueError("point weights must be positive")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        for name in ("view_ids", "pixels", "ray_t"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != n:
                raise ValueError(f"{name} length does not match the point count")

    def __len__(self):
        return len(self.points)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def has_provenance(self) -> bool:
        return self.view_ids is not None and self.pixels is not None and self.ray_t is not None

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def empty(cls, channels: int, provenance: bool = True) -> "FeaturePointCloud":
        return cls(
            np.zeros((0, 3)),
            np.zeros(0),
            np.zeros((0, channels)),
            np.zeros(0, np.int32) if provenance else None,
            np.zeros((0, 2), np.int32) if provenance else None,
            np.zeros(0) if provenance else None,
        )

    @classmethod
    def concat(cls, clouds: Sequence["FeaturePointCloud"]) -> "FeaturePointCloud":
        if not clouds:
            raise ValueError("nothing to concatenate")
        prov = all(c.has_provenance for c in clouds)
        return cls(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.weights for c in clouds]),
            np.concatenate([c.features for c in clouds]),
            np.concatenate([c.view_ids for c in clouds]) if prov else None,
            np.concatenate([c.pixels for c in clouds]) if prov else None,
            np.concatenate([c.ray_t for c in clouds]) if prov else None,
        )


@dataclass(frozen=True, eq=False)
class SparseFeatureVoxels:
    """Weighted merge of a point cloud on an integer voxel lattice; coords sorted lexicographically."""

    voxel_size: float
    coords: np.ndarray
    weights: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.coords)

    def entries(self) -> Dict[Tuple[int, int, int], Tuple[float, np.ndarray]]:
        return {tuple(int(x) for x in c): (float(w), f) for c, w, f in zip(self.coords, self.weights, self.features)}

    def centers(self) -> np.ndarray:
        return (self.coords + 0.5) * self.voxel_size

    def to_cloud(self) -> FeaturePointCloud:
        return FeaturePointCloud(self.centers(), self.weights.copy(), self.features.copy())


@dataclass(frozen=True, eq=False)
class VolumeFeatures:
    dims: Tuple[int, int, int]
    origin: Tuple[float, float, float]
    voxel_size: float
    features: np.ndarray
    view_count: np.ndarray


def _run(tasks: Sequence, fn: Callable, workers: int) -> List:
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))


# ---------------------------------------------------------------------------
# Ray marching
# ---------------------------------------------------------------------------


def sample_distances(n: int, t_max: float) -> np.ndarray:
    """``n`` uniformly spaced distances on ``(0, t_max]``."""
    return np.arange(1, n + 1, dtype=np.float64) * (t_max / n)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def opacity(tsdf, sigmoid_scale: float) -> np.ndarray:
    """Opacity of each interval ``[t_i, t_{i+1}]``; the last sample gets 0.

    ``(sig(s*S_i) - sig(s*S_{i+1})) / sig(s*S_i) = 1 - exp(logsig_{i+1} - logsig_i)``,
    evaluated in log space so it stays exact where the sigmoid underflows.
    """
    ls = log_sigmoid(sigmoid_scale * np.asarray(tsdf, dtype=np.float64))
    alpha = np.zeros_like(ls)
    # clamping the log ratio at 0 is the max(., 0) clamp and keeps expm1 from overflowing
    alpha[..., :-1] = -np.expm1(np.minimum(ls[..., 1:] - ls[..., :-1], 0.0))
    return alpha


def composite(alpha) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Transmittance, weights and the transmittance left after the last sample.

    Weights are taken as successive transmittance differences so that
    ``W_i == T_i - T_{i+1}`` holds bit for bit.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    full = np.ones(alpha.shape[:-1] + (alpha.shape[-1] + 1,))
    np.cumprod(1.0 - alpha, axis=-1, out=full[..., 1:])
    weight = full[..., :-1] - full[..., 1:]
    return full[..., :-1], weight, full[..., -1]


def _sample_tsdf(grid: TsdfGrid, origins, directions, t, lookup: str) -> np.ndarray:
    pts = origins[:, None, :] + directions[:, None, :] * t[None, :, None]
    return grid.query(pts, lookup)


def march_rays(grid: TsdfGrid, origins, directions, cfg: RmaConfig) -> RayProfile:
    """March a batch of rays (``directions`` of shape ``(R, 3)``)."""
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    t = sample_distances(cfg.samples_per_ray, cfg.resolve_t_max(grid))
    tsdf = _sample_tsdf(grid, origins, directions, t, cfg.tsdf_lookup)
    alpha = opacity(tsdf, cfg.sigmoid_scale)
    trans, weight, end = composite(alpha)
    return RayProfile(np.broadcast_to(t, tsdf.shape), tsdf, alpha, trans, weight, end)


def march_ray(grid: TsdfGrid, ray: Ray, cfg: RmaConfig) -> RayProfile:
    p = march_rays(grid, ray.origin, ray.direction[None], cfg)
    return RayProfile(p.t[0], p.tsdf[0], p.alpha[0], p.transmittance[0], p.weight[0], p.transmittance_end[0])


def march_view(grid: TsdfGrid, view: CameraView, cfg: RmaConfig) -> RayProfile:
    """Profiles for every pixel of ``view``, rays in row-major pixel order."""
    return march_rays(grid, view.center, pixel_grid_directions(view).reshape(-1, 3), cfg)


def _ray_tasks(views: Sequence[CameraView], chunk: int):
    tasks = []
    for vi, view in enumerate(views):
        n = view.width * view.height
        tasks.extend((vi, s, min(s + chunk, n)) for s in range(0, n, chunk))
    return tasks


def _emit(view: CameraView, vi: int, ray_idx, sample_t, weights, directions) -> FeaturePointCloud:
    """Build the cloud for samples ``sample_t`` along rays ``ray_idx`` (flat pixel indices)."""
    rows, cols = np.divmod(ray_idx, view.width)
    feats = view.features.data[rows, cols].astype(np.float64)
    pts = view.center + directions * sample_t[:, None]
    pixels = np.stack([cols, rows], axis=1).astype(np.int32)
    return FeaturePointCloud(pts, weights, feats, np.full(len(pts), vi, np.int32), pixels, sample_t)


def rma_aggregate(grid: TsdfGrid, views: Sequence[CameraView], cfg: RmaConfig = RmaConfig(),
                  workers: int = 1) -> FeaturePointCloud:
    """Keep every ray sample whose weight exceeds the threshold, tagged with its pixel feature.

    Output order: views, then pixels row-major, then samples by distance.
    """
    if not views:
        raise ValueError("rma_aggregate needs at least one view")
    dirs = [pixel_grid_directions(v).reshape(-1, 3) for v in views]

    def work(task):
        vi, s, e = task
        view = views[vi]
        prof = march_rays(grid, view.center, dirs[vi][s:e], cfg)
        keep = prof.weight > cfg.weight_threshold
        r, i = np.nonzero(keep)
        w = prof.weight[r, i] if cfg.feature_weight == "weight" else prof.alpha[r, i]
        return _emit(view, vi, r + s, prof.t[r, i], w, dirs[vi][s + r])

    parts = _run(_ray_tasks(views, RAY_CHUNK), work, workers)
    return FeaturePointCloud.concat([FeaturePointCloud.empty(views[0].features.channels)] + parts)


# ---------------------------------------------------------------------------
# Depth aggregation
# ---------------------------------------------------------------------------


def first_hitting_points(tsdf) -> np.ndarray:
    """Index of the first sign change per row of ``tsdf`` (``-1`` for none)."""
    tsdf = np.asarray(tsdf, dtype=np.float64)
    crossing = tsdf[..., :-1] * tsdf[..., 1:] <= 0
    idx = np.argmax(crossing, axis=-1)
    return np.where(crossing.any(axis=-1), idx, -1)


def first_hitting_point(profile) -> Optional[int]:
    """First ``i`` with ``S_i * S_{i+1} <= 0`` along one profile, or ``None`` (miss)."""
    tsdf = profile.tsdf if isinstance(profile, RayProfile) else profile
    tsdf = np.asarray(tsdf)
    if tsdf.ndim != 1 or len(tsdf) < 2:
        raise ValueError("first_hitting_point needs a single profile with >= 2 samples")
    i = int(first_hitting_points(tsdf))
    return None if i < 0 else i


def da_window(k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Offsets ``-k+1 .. k`` around the first hit and their unnormalized triangular weights.

    Weights fall linearly with distance from the zero crossing, which lies
    halfway between the first hit and the next sample: ``k - |o - 1/2|``.
    """
    offsets = np.arange(-k + 1, k + 1)
    return offsets, k - np.abs(offsets - 0.5)


def da_aggregate(grid: TsdfGrid, views: Sequence[CameraView], cfg: DaConfig = DaConfig(),
                 workers: int = 1) -> FeaturePointCloud:
    """Vote each pixel feature to ``2k`` samples around its first TSDF zero crossing.

    Window samples falling outside the marched range are dropped and the
    remaining weights renormalized to sum to one per ray.
    """
    if not views:
        raise ValueError("da_aggregate needs at least one view")
    n = cfg.samples_per_ray
    t = sample_distances(n, cfg.resolve_t_max(grid))
    offsets, base = da_window(cfg.k)
    dirs = [pixel_grid_directions(v).reshape(-1, 3) for v in views]

    def work(task):
        vi, s, e = task
        view = views[vi]
        d = dirs[vi][s:e]
        fhp = first_hitting_points(_sample_tsdf(grid, np.broadcast_to(view.center, d.shape), d, t, cfg.tsdf_lookup))
        hit = np.nonzero(fhp >= 0)[0]
        idx = fhp[hit, None] + offsets[None, :]
        valid = (idx >= 0) & (idx < n)
        w = np.where(valid, base[None, :], 0.0)
        w = w / w.sum(axis=1, keepdims=True)
        r, c = np.nonzero(valid)
        rays = hit[r]
        return _emit(view, vi, rays + s, t[idx[r, c]], w[r, c], d[rays])

    parts = _run(_ray_tasks(views, RAY_CHUNK), work, workers)
    return FeaturePointCloud.concat([FeaturePointCloud.empty(views[0].features.channels)] + parts)


# ---------------------------------------------------------------------------
# Volume aggregation
# ---------------------------------------------------------------------------


def va_aggregate(views: Sequence[CameraView], dims, origin, voxel_size: float = AGGREGATION_VOXEL_SIZE,
                 sampling_mode: str = NEAREST, workers: int = 1) -> VolumeFeatures:
    """Average the features of every view that sees each voxel center (unweighted)."""
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError(f"dims must be three positive counts, got {dims}")
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    if not views:
        raise ValueError("va_aggregate needs at least one view")
    channels = views[0].features.channels
    if any(v.features.channels != channels for v in views):
        raise ValueError("all views must have the same channel count")
    centers = voxel_centers(dims, origin, voxel_size).reshape(-1, 3)
    total = len(centers)

    def work(task):
        s, e = task
        acc = np.zeros((e - s, channels))
        count = np.zeros(e - s, np.int64)
        for view in views:
            u, v, _ = project_points(view, centers[s:e])
            vals, valid = sample_features(view.features, u, v, sampling_mode)
            acc += vals
            count += valid
        return acc, count

    parts = _run([(s, min(s + VOXEL_CHUNK, total)) for s in range(0, total, VOXEL_CHUNK)], work, workers)
    acc = np.concatenate([p[0] for p in parts])
    count = np.concatenate([p[1] for p in parts])
    feats = np.where(count[:, None] > 0, acc / np.maximum(count, 1)[:, None], 0.0)
    return VolumeFeatures(dims, tuple(float(x) for x in origin), float(voxel_size),
                          feats.reshape(dims + (channels,)), count.reshape(dims))


def volume_to_cloud(vol: VolumeFeatures, grid: TsdfGrid, band: float) -> FeaturePointCloud:
    """Observed voxel centers with ``|TSDF| < band``, each with weight 1."""
    if not band > 0:
        raise ValueError("band must be positive")
    centers = voxel_centers(vol.dims, vol.origin, vol.voxel_size).reshape(-1, 3)
    count = vol.view_count.reshape(-1)
    keep = (count > 0) & (np.abs(grid.query(centers)) < band)
    feats = vol.features.reshape(-1, vol.features.shape[-1])[keep]
    return FeaturePointCloud(centers[keep], np.ones(int(keep.sum())), feats)


# ---------------------------------------------------------------------------
# Sparse voxel merge
# ---------------------------------------------------------------------------


def _reduce(keys, weights, weighted_feats):
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    wsum = np.bincount(inverse, weights=weights, minlength=len(uniq))
    fsum = np.zeros((len(uniq), weighted_feats.shape[1]))
    np.add.at(fsum, inverse, weighted_feats)
    return uniq, wsum, fsum


def voxelize(cloud: FeaturePointCloud, voxel_size: float = MERGE_VOXEL_SIZE,
             workers: int = 1) -> SparseFeatureVoxels:
    """Weighted-mean merge of ``cloud`` into voxels ``floor(point / voxel_size)``.

    With several workers each thread reduces a contiguous slice and the
    partial sums are merged in sorted key order.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    c = cloud.channels
    if len(cloud) == 0:
        return SparseFeatureVoxels(voxel_size, np.zeros((0, 3), np.int64), np.zeros(0), np.zeros((0, c)))
    keys = np.floor(cloud.points / voxel_size).astype(np.int64)
    wf = cloud.features * cloud.weights[:, None]
    n = len(keys)
    step = -(-n // workers)
    slices = [(s, min(s + step, n)) for s in range(0, n, step)]
    parts = _run(slices, lambda se: _reduce(keys[se[0]:se[1]], cloud.weights[se[0]:se[1]], wf[se[0]:se[1]]),
                 workers)
    if len(parts) == 1:
        uniq, wsum, fsum = parts[0]
    else:
        uniq, wsum, fsum = _reduce(np.concatenate([p[0] for p in parts]),
                                   np.concatenate([p[1] for p in parts]),
                                   np.concatenate([p[2] for p in parts]))
    return SparseFeatureVoxels(float(voxel_size), uniq, wsum, fsum / wsum[:, None])
