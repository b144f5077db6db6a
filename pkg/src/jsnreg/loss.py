"""Two-region Euclidean-distance registration loss.

The fixed image's mask S splits every image into an upper part (S == 0)
and a lower part (S == 1). The loss between two images is the root of the
mean squared difference over the *whole* grid (m x n), and the two-region
loss is the weighted sum of the per-region losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import JointImage, LossSpectrum, SegmentationMask


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        for name, w in (("alpha", self.alpha), ("beta", self.beta)):
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {w}")
        if abs(self.alpha + self.beta - 1.0) > 1e-12:
            raise ValueError(f"alpha + beta must equal 1, got {self.alpha + self.beta}")


@dataclass(frozen=True, eq=False)
class RegionPair:
    """Upper and lower parts of an image; each is zero outside its region."""

    upper: np.ndarray
    lower: np.ndarray

    def __post_init__(self):
        if self.upper.shape != self.lower.shape:
            raise ValueError("region images differ in size")


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, JointImage) else np.asarray(img, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def partition(image: JointImage | np.ndarray, mask: SegmentationMask) -> RegionPair:
    px = _pixels(image)
    _check_shapes(px, mask.labels)
    lab = mask.labels.astype(np.float64)
    return RegionPair(upper=px * (1.0 - lab), lower=px * lab)


def compose(regions: RegionPair) -> np.ndarray:
    return regions.upper + regions.lower


def euclidean_loss(a, b) -> float:
    """sqrt(mean((a - b)^2)) over the full grid."""
    pa, pb = _pixels(a), _pixels(b)
    _check_shapes(pa, pb)
    d = pa - pb
    return math.sqrt(float(np.sum(d * d)) / d.size)


def region_loss(fixed, warped: RegionPair, mask: SegmentationMask,
                w: LossWeights = LossWeights()) -> tuple[float, float, float]:
    """Return (total, upper, lower) for a fixed image and warped region images."""
    f = partition(fixed, mask)
    _check_shapes(f.upper, warped.upper)
    # re-mask the warped parts so callers may pass unmasked warps
    upper = euclidean_loss(f.upper, warped.upper * mask.upper)
    lower = euclidean_loss(f.lower, warped.lower * mask.lower)
    return w.alpha * upper + w.beta * lower, upper, lower


def loss_spectrum(a, b) -> LossSpectrum:
    pa, pb = _pixels(a), _pixels(b)
    _check_shapes(pa, pb)
    return LossSpectrum(np.abs(pa - pb))
