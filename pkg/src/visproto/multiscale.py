"""Multi-scale feature schedules, center crops, and weighted aggregation.

Pure deterministic math, no I/O. The scale schedule assigns each level n
(1-based) a linearly decaying weight and a harmonic crop ratio:

    weight(n) = (N + 1 - n) / (1 + 2 + ... + N)
    ratio(n)  = 1 / n

so full resolution carries the most weight and weights sum to 1 exactly.
The aggregate of the per-scale features is their weighted sum, re-normalized
to unit length by default so downstream inner products are cosines.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

WEIGHT_SUM_TOL = 1e-9
UNIT_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ScaleSchedule:
    """Per-scale (weight, crop_ratio) pairs for ``n_scales`` levels."""

    n_scales: int
    weights: tuple[float, ...]
    crop_ratios: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")
        if len(self.weights) != self.n_scales or len(self.crop_ratios) != self.n_scales:
            raise ValueError("schedule entries must match n_scales")

    @property
    def entries(self) -> list[tuple[float, float]]:
        return list(zip(self.weights, self.crop_ratios))

    def digest(self) -> str:
        """Stable hex digest of the schedule, used in feature-cache keys."""
        h = hashlib.sha256()
        h.update(str(self.n_scales).encode())
        for w, r in zip(self.weights, self.crop_ratios):
            h.update(repr(w).encode())
            h.update(repr(r).encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class CropRegion:
    """Axis-aligned pixel region, fully inside its source image."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("crop region must be at least 1x1")
        if self.x < 0 or self.y < 0:
            raise ValueError("crop region offsets must be non-negative")

    def as_box(self) -> tuple[int, int, int, int]:
        """(left, upper, right, lower) box for PIL."""
        return (self.x, self.y, self.x + self.width, self.y + self.height)


def make_schedule(n_scales: int) -> ScaleSchedule:
    """Build the scale schedule for ``n_scales`` levels.

    Weights decrease linearly and sum to 1 (the triangular-number identity);
    crop ratios are 1, 1/2, ..., 1/N.
    """
    if n_scales < 1:
        raise ValueError(f"n_scales must be a positive integer, got {n_scales}")
    total = n_scales * (n_scales + 1) / 2.0
    weights = tuple((n_scales + 1 - n) / total for n in range(1, n_scales + 1))
    crop_ratios = tuple(1.0 / n for n in range(1, n_scales + 1))
    return ScaleSchedule(n_scales=n_scales, weights=weights, crop_ratios=crop_ratios)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def crop_region_for_scale(
    image_width: int, image_height: int, crop_ratio: float
) -> CropRegion:
    """Center-anchored crop covering ``crop_ratio`` of each dimension.

    Sizes use round-half-up with a 1 px floor; the region is centered with
    offset (dim - size + 1) // 2 and never escapes the image bounds.
    Ratio 1 returns the full image.
    """
    if image_width < 1 or image_height < 1:
        raise ValueError("image dimensions must be >= 1")
    if not 0.0 < crop_ratio <= 1.0:
        raise ValueError(f"crop_ratio must be in (0, 1], got {crop_ratio}")
    width = max(1, _round_half_up(crop_ratio * image_width))
    height = max(1, _round_half_up(crop_ratio * image_height))
    width = min(width, image_width)
    height = min(height, image_height)
    x = (image_width - width + 1) // 2
    y = (image_height - height + 1) // 2
    return CropRegion(x=x, y=y, width=width, height=height)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit Euclidean norm, preserving dtype and direction."""
    arr = np.asarray(v)
    norm = float(np.linalg.norm(arr.astype(np.float64)))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return (arr.astype(np.float64) / norm).astype(arr.dtype)


def aggregate_multiscale(
    per_scale_features: list[np.ndarray] | tuple[np.ndarray, ...],
    schedule: ScaleSchedule,
    *,
    normalize: bool = True,
) -> np.ndarray:
    """Weighted sum of per-scale features under ``schedule``.

    Expects one unit-norm feature per scale, all of the same dimension.
    With ``normalize=True`` (default) the weighted sum is re-normalized to
    unit length; ``normalize=False`` returns the raw weighted sum.
    """
    if len(per_scale_features) != schedule.n_scales:
        raise ValueError(
            f"expected {schedule.n_scales} per-scale features, "
            f"got {len(per_scale_features)}"
        )
    features = [np.asarray(f) for f in per_scale_features]
    dim = features[0].shape
    if any(f.shape != dim for f in features):
        raise ValueError("per-scale features must share one dimension")
    acc = np.zeros(dim, dtype=np.float64)
    for weight, feature in zip(schedule.weights, features):
        acc += weight * feature.astype(np.float64)
    out_dtype = features[0].dtype
    if not normalize:
        return acc.astype(out_dtype)
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        raise ValueError("aggregate has zero norm; cannot re-normalize")
    return (acc / norm).astype(out_dtype)
