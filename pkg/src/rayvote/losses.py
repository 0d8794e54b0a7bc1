"""Loss evaluators: multi-scale log-L1 TSDF loss, detection loss terms and their weighted total.

These are plain numpy evaluators (no gradients).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .tsdf import TsdfGrid

RECON_LOSS_WEIGHT = 0.5
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
PYRAMID_LEVELS = 3


def log_tsdf_transform(x):
    """``sgn(x) * ln(1 + |x|)``; returns a float for scalar input."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.log1p(np.abs(x))
    return float(out) if out.ndim == 0 else out


def _downsample(grid: TsdfGrid) -> TsdfGrid:
    """Halve each dimension (rounding up) by averaging the available 2x2x2 children."""
    v = grid.values.astype(np.float64)
    dims = np.asarray(v.shape)
    out_dims = -(-dims // 2)
    padded = np.full(tuple(out_dims * 2), np.nan)
    padded[: dims[0], : dims[1], : dims[2]] = v
    blocks = padded.reshape(out_dims[0], 2, out_dims[1], 2, out_dims[2], 2)
    mean = np.nanmean(blocks, axis=(1, 3, 5))
    origin = np.asarray(grid.origin) + grid.voxel_size / 2
    return TsdfGrid(mean.astype(np.float32), origin, grid.voxel_size * 2, grid.truncation)


@dataclass(frozen=True, eq=False)
class TsdfPyramid:
    """TSDF levels ordered coarse to fine; each level halves the next finer resolution."""

    levels: List[TsdfGrid]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        object.__setattr__(self, "levels", list(self.levels))

    @classmethod
    def from_grid(cls, grid: TsdfGrid, levels: int = PYRAMID_LEVELS) -> "TsdfPyramid":
        if levels < 1:
            raise ValueError("levels must be >= 1")
        out = [grid]
        for _ in range(levels - 1):
            out.append(_downsample(out[-1]))
        return cls(out[::-1])

    @property
    def finest(self) -> TsdfGrid:
        return self.levels[-1]


def _as_levels(p) -> Sequence[np.ndarray]:
    if isinstance(p, TsdfPyramid):
        return [g.values for g in p.levels]
    if isinstance(p, TsdfGrid):
        return [p.values]
    return [np.asarray(x.values if isinstance(x, TsdfGrid) else x) for x in p]


def recon_loss(pred, truth) -> float:
    """Sum over levels of the mean absolute difference of log-transformed TSDFs.

    Accepts pyramids, single grids, or sequences of grids/arrays.
    """
    pl, tl = _as_levels(pred), _as_levels(truth)
    if len(pl) != len(tl):
        raise ValueError(f"level count mismatch: {len(pl)} vs {len(tl)}")
    total = 0.0
    for a, b in zip(pl, tl):
        if a.shape != b.shape:
            raise ValueError(f"level shape mismatch: {a.shape} vs {b.shape}")
        total += float(np.mean(np.abs(log_tsdf_transform(a.astype(np.float64))
                                      - log_tsdf_transform(b.astype(np.float64)))))
    return total


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -np.asarray(x, dtype=np.float64)))


def focal_loss(pred_probs, target_class: Optional[int], gamma: float = FOCAL_GAMMA,
               alpha: float = FOCAL_ALPHA, from_logits: bool = False) -> float:
    """Sigmoid focal loss summed over classes for one location.

    ``target_class`` is the matched class index, or ``None``/negative for background.
    """
    p = np.atleast_1d(np.asarray(pred_probs, dtype=np.float64))
    if from_logits:
        p = _sigmoid(p)
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError("probabilities must lie in (0, 1)")
    target = np.zeros_like(p)
    if target_class is not None and target_class >= 0:
        if target_class >= len(p):
            raise ValueError(f"target class {target_class} out of range for {len(p)} classes")
        target[target_class] = 1.0
    pos = -alpha * (1 - p) ** gamma * np.log(p)
    neg = -(1 - alpha) * p ** gamma * np.log1p(-p)
    return float(np.sum(np.where(target == 1, pos, neg)))


def _box_bounds(box):
    b = np.asarray(box, dtype=np.float64).reshape(6)
    center, size = b[:3], b[3:]
    if np.any(size <= 0):
        raise ValueError(f"degenerate box with size {size}")
    return center - size / 2, center + size / 2


def aabb_iou(a, b) -> float:
    """IoU of two axis-aligned boxes given as ``(cx, cy, cz, sx, sy, sz)``."""
    alo, ahi = _box_bounds(a)
    blo, bhi = _box_bounds(b)
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None)))
    union = float(np.prod(ahi - alo) + np.prod(bhi - blo)) - inter
    return inter / union


def iou_loss(a, b) -> float:
    return 1.0 - aabb_iou(a, b)


def centerness_bce(pred: float, target: float) -> float:
    if not 0 < pred < 1:
        raise ValueError("predicted centerness must lie in (0, 1)")
    if not 0 <= target <= 1:
        raise ValueError("target centerness must lie in [0, 1]")
    return float(-(target * np.log(pred) + (1 - target) * np.log1p(-pred)))


@dataclass(frozen=True, eq=False)
class BoxPrediction:
    """Per-location detector outputs.

    scores: ``(N, K)`` class probabilities (or logits when ``logits`` is set);
    boxes: ``(N, 6)`` center + size; centerness: ``(N,)`` in (0, 1).
    """

    scores: np.ndarray
    boxes: np.ndarray
    centerness: np.ndarray
    logits: bool = False


@dataclass(frozen=True, eq=False)
class DetectionTargets:
    """Per-location targets; ``labels[i] < 0`` marks an unmatched (background) location."""

    labels: np.ndarray
    boxes: np.ndarray
    centerness: np.ndarray

    def match_mask(self) -> np.ndarray:
        return np.asarray(self.labels) >= 0


def det_loss(preds: BoxPrediction, targets: DetectionTargets, mask=None) -> float:
    """``(1 / N_pos) * sum(L_cls + m * L_reg + m * L_cntr)``; 0 when nothing is matched."""
    scores = np.atleast_2d(np.asarray(preds.scores, dtype=np.float64))
    n = len(scores)
    labels = np.asarray(targets.labels).reshape(-1)
    m = targets.match_mask() if mask is None else np.asarray(mask, dtype=bool).reshape(-1)
    sizes = {len(labels), len(m), len(preds.boxes), len(preds.centerness), len(targets.boxes),
             len(targets.centerness)}
    if sizes != {n}:
        raise ValueError("predictions, targets and mask must cover the same locations")
    n_pos = int(m.sum())
    if n_pos == 0:
        return 0.0
    total = 0.0
    for i in range(n):
        total += focal_loss(scores[i], int(labels[i]) if m[i] else None, from_logits=preds.logits)
        if m[i]:
            total += iou_loss(preds.boxes[i], targets.boxes[i])
            total += centerness_bce(float(preds.centerness[i]), float(targets.centerness[i]))
    return total / n_pos


def total_loss(recon: float, det: float, weight: float = RECON_LOSS_WEIGHT) -> float:
    """``weight * recon + det``."""
    if weight < 0:
        raise ValueError("loss weight must be non-negative")
    return weight * recon + det
