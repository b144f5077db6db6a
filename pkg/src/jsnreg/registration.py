"""Per-pair two-region registration and JSN quantification.

Both bone regions get their own (dz, dtheta, dx, dy). The objective is the
weighted two-region Euclidean loss, minimised by Adam on analytic gradients
over a coarse-to-fine pyramid, restarted from several initial rotations.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _accel
from .imaging import JointImage, SegmentationMask
from .loss import LossWeights, RegionPair, compose, euclidean_loss, region_loss
from .optim import Adam
from .transform import CONVENTION, RigidParams, build_matrix, warp_array, warp_labels

MIN_LEVEL_SIZE = 16


@dataclass(frozen=True)
class OptimizerConfig:
    """Optimiser settings. Angles in radians, displacements in full-resolution pixels."""

    pyramid_levels: int = 3
    max_iterations_per_level: int = 500
    step_size: float = 0.01
    step_decay: float = 0.5
    plateau_patience: int = 20
    convergence_tolerance: float = 1e-6
    max_decays: int = 10
    coarse_max_decays: int = 4
    dz_min: float = 0.8
    dz_max: float = 1.25
    theta_max: float = math.radians(30.0)
    x_max: float = 20.0
    y_max: float = 20.0
    rotation_seeds: tuple = (math.radians(-10.0), 0.0, math.radians(10.0))
    rng_seed: int = 0
    smoothing_sigma: float = 1.0
    min_mask_overlap: float = 0.5
    bound_tolerance: float = 1e-4
    border_fill: bool = True

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations_per_level < 1:
            raise ValueError("max_iterations_per_level must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.step_decay < 1:
            raise ValueError("step_decay must lie in (0, 1)")
        if self.convergence_tolerance <= 0:
            raise ValueError("convergence_tolerance must be positive")
        if not (self.dz_min <= 1.0 <= self.dz_max and self.dz_min > 0):
            raise ValueError("dz bounds must contain 1")
        if min(self.theta_max, self.x_max, self.y_max) < 0:
            raise ValueError("bounds must contain the identity")
        if not self.rotation_seeds:
            raise ValueError("at least one rotation seed is required")
        for s in self.rotation_seeds:
            if abs(s) > self.theta_max:
                raise ValueError(f"rotation seed {math.degrees(s):.3g} deg lies outside the bounds")
        object.__setattr__(self, "rotation_seeds", tuple(float(s) for s in self.rotation_seeds))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    p_upper: RigidParams
    p_lower: RigidParams
    original_loss_regional: float
    original_loss_global: float
    warped_loss: float
    warped_loss_upper: float
    warped_loss_lower: float
    jsn_pixels: float
    jsn_mm: float
    resolution: float
    iterations_used: tuple
    converged: bool
    at_bounds: dict
    mismatch: bool
    mask_overlap_diagnostic: float
    seed_used: float = 0.0
    warped: JointImage | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "p_upper": self.p_upper.to_dict(),
            "p_lower": self.p_lower.to_dict(),
            "original_loss_regional": self.original_loss_regional,
            "original_loss_global": self.original_loss_global,
            "warped_loss": self.warped_loss,
            "warped_loss_upper": self.warped_loss_upper,
            "warped_loss_lower": self.warped_loss_lower,
            "jsn_px": self.jsn_pixels,
            "jsn_mm": self.jsn_mm,
            "resolution_mm_per_px": self.resolution,
            "iterations_used": list(self.iterations_used),
            "converged": self.converged,
            "at_bounds": self.at_bounds,
            "mismatch": self.mismatch,
            "mask_overlap_diagnostic": self.mask_overlap_diagnostic,
            "seed_deg": math.degrees(self.seed_used),
            "convention": CONVENTION,
        }


def jsn_progression(result_or_dy, resolution: float | None = None) -> tuple[float, float]:
    """JSN as upper minus lower vertical displacement, in pixels and mm.

    Accepts a :class:`RegistrationResult` or a ``(dy_upper, dy_lower)`` tuple.
    Image y points down, so positive dy moves a region down.
    """
    if isinstance(result_or_dy, RegistrationResult):
        dy0, dy1 = result_or_dy.p_upper.dy, result_or_dy.p_lower.dy
        res = result_or_dy.resolution if resolution is None else resolution
    else:
        dy0, dy1 = result_or_dy
        res = 1.0 if resolution is None else resolution
    px = dy0 - dy1
    return px, px * res


# ---------------------------------------------------------------- pyramid


def downsample(a: np.ndarray) -> np.ndarray:
    """2x2 box average (an odd trailing row/column is dropped)."""
    h, w = a.shape[0] // 2, a.shape[1] // 2
    return a[: 2 * h, : 2 * w].reshape(h, 2, w, 2).mean(axis=(1, 3))


@dataclass
class _Level:
    fixed: np.ndarray
    moving: np.ndarray
    upper: np.ndarray
    lower: np.ndarray
    scale: float  # level pixels per full-resolution pixel

    @property
    def shape(self):
        return self.fixed.shape


def border_level(pixels: np.ndarray) -> float:
    """Median of the outermost ring of pixels, taken as the background level."""
    ring = np.concatenate([pixels[0], pixels[-1], pixels[1:-1, 0], pixels[1:-1, -1]])
    return float(np.median(ring))


def build_pyramid(fixed: np.ndarray, moving: np.ndarray, labels: np.ndarray,
                  levels: int, smoothing_sigma: float = 1.0) -> list[_Level]:
    """Levels ordered finest first. The coarsest two levels (never the finest) are smoothed."""
    n = 1
    h, w = fixed.shape
    while n < levels and min(h, w) // 2 >= MIN_LEVEL_SIZE:
        h, w = h // 2, w // 2
        n += 1
    out = []
    f, m, lab = fixed.astype(np.float64), moving.astype(np.float64), labels.astype(np.float64)
    for k in range(n):
        if k > 0:
            f, m, lab = downsample(f), downsample(m), downsample(lab)
        fs, ms = f, m
        if k > 0 and k >= n - 2 and smoothing_sigma > 0:
            fs = gaussian_filter(f, smoothing_sigma, mode="nearest")
            ms = gaussian_filter(m, smoothing_sigma, mode="nearest")
        lower = lab >= 0.5
        out.append(_Level(np.ascontiguousarray(fs), np.ascontiguousarray(ms),
                          np.ascontiguousarray(~lower), np.ascontiguousarray(lower), 0.5 ** k))
    return out


# ---------------------------------------------------------------- objective


class TwoRegionObjective:
    """Two-region loss and gradient on one pyramid level.

    Works in scaled variables z = (dz - 1, dtheta, dx / W, dy / H) per region,
    with dx, dy in level pixels, so a single step size suits every parameter.
    """

    def __init__(self, level: _Level, weights: LossWeights = LossWeights()):
        self.level = level
        self.weights = (weights.alpha, weights.beta)
        h, w = level.shape
        self.n = float(h * w)
        self.zscale = np.array([1.0, 1.0, float(w), float(h)])
        self.masks = (level.upper, level.lower)

    def params(self, z: np.ndarray) -> np.ndarray:
        """(2, 4) array of (dz, dtheta, dx, dy) in level pixels."""
        p = z * self.zscale
        p[:, 0] += 1.0
        return p

    def region(self, k: int, p: np.ndarray) -> tuple[float, np.ndarray]:
        """Loss of region ``k`` at raw params ``p`` and its gradient w.r.t. ``p``."""
        g = np.zeros(4)
        ssq = _accel.region_objective(self.level.fixed, self.level.moving, self.masks[k],
                                      np.ascontiguousarray(p, dtype=np.float64), g)
        loss = math.sqrt(ssq / self.n)
        if loss > 0:
            g = g / (self.n * loss)
        else:
            g[:] = 0.0
        return loss, g

    def __call__(self, z: np.ndarray) -> tuple[float, np.ndarray, tuple[float, float]]:
        p = self.params(z)
        grad = np.zeros_like(z)
        parts = []
        total = 0.0
        for k in (0, 1):
            loss, g = self.region(k, p[k])
            total += self.weights[k] * loss
            grad[k] = self.weights[k] * g * self.zscale
            parts.append(loss)
        return total, grad, tuple(parts)


def _bounds(cfg: OptimizerConfig, full_shape) -> tuple[np.ndarray, np.ndarray]:
    """Box bounds in scaled variables; identical on every pyramid level."""
    h, w = full_shape
    hi = np.array([cfg.dz_max - 1.0, cfg.theta_max, cfg.x_max / w, cfg.y_max / h])
    lo = np.array([cfg.dz_min - 1.0, -cfg.theta_max, -hi[2], -hi[3]])
    return np.tile(lo, (2, 1)), np.tile(hi, (2, 1))


def _optimize_level(obj: TwoRegionObjective, z0: np.ndarray, lo, hi, cfg: OptimizerConfig,
                    lr: float, max_decays: int):
    opt = Adam(lr=lr)
    z = np.clip(z0, lo, hi)
    loss, grad, _ = obj(z)
    best_loss, best_z = loss, z.copy()
    since = 0
    decays = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations_per_level + 1):
        z = opt.step(z, grad, lo, hi)
        loss, grad, _ = obj(z)
        if loss < best_loss - cfg.convergence_tolerance:
            since = 0
        else:
            since += 1
        if loss < best_loss:
            best_loss, best_z = loss, z.copy()
        if since >= cfg.plateau_patience:
            if decays >= max_decays:
                converged = True
                break
            decays += 1
            since = 0
            opt.lr *= cfg.step_decay
            # restart from the best point seen; Adam state is kept
            z = best_z.copy()
            loss, grad, _ = obj(z)
    return best_z, best_loss, it, converged


def _validate_inputs(fixed, moving, fixed_mask, moving_mask):
    if fixed.shape != moving.shape:
        raise ValueError(f"dimension mismatch: fixed {fixed.shape} vs moving {moving.shape}")
    fixed_mask.check_matches(fixed)
    moving_mask.check_matches(moving)
    if not math.isclose(fixed.resolution, moving.resolution, rel_tol=1e-9):
        raise ValueError(f"resolution mismatch: {fixed.resolution} vs {moving.resolution}")


def _dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = a.astype(bool), b.astype(bool)
    den = a.sum() + b.sum()
    return 1.0 if den == 0 else 2.0 * float(np.sum(a & b)) / float(den)


@dataclass(frozen=True, eq=False)
class WarpedMoving:
    warped: JointImage
    regions: RegionPair
    warped_mask_upper: np.ndarray
    warped_mask_lower: np.ndarray


def warp_moving(moving: JointImage, moving_mask: SegmentationMask, p_upper: RigidParams,
                p_lower: RigidParams, fixed_mask: SegmentationMask | None = None) -> WarpedMoving:
    """Warp the moving image once per region and recombine through the fixed mask.

    The moving mask is warped per region with nearest-neighbour sampling for
    the overlap diagnostic only.
    """
    s = moving_mask if fixed_mask is None else fixed_mask
    s.check_matches(moving)
    t0, t1 = build_matrix(p_upper), build_matrix(p_lower)
    lab = s.labels.astype(np.float64)
    regions = RegionPair(upper=warp_array(moving.pixels, t0) * (1.0 - lab),
                         lower=warp_array(moving.pixels, t1) * lab)
    warped = moving.with_pixels(compose(regions))
    mu = warp_labels(moving_mask.upper.astype(np.uint8), t0)
    ml = warp_labels(moving_mask.lower.astype(np.uint8), t1)
    return WarpedMoving(warped, regions, mu.astype(bool), ml.astype(bool))


def register_pair(fixed: JointImage, moving: JointImage, fixed_mask: SegmentationMask,
                  moving_mask: SegmentationMask, cfg: OptimizerConfig = OptimizerConfig(),
                  w: LossWeights = LossWeights(), keep_warped: bool = False) -> RegistrationResult:
    """Estimate upper and lower region transforms aligning ``moving`` onto ``fixed``."""
    _validate_inputs(fixed, moving, fixed_mask, moving_mask)
    # Shifting both images by the same constant leaves in-frame residuals alone but
    # makes the zero fill beyond the moving frame read as background. Without it a
    # bright background at the frame edge drags dz (and through it dy) off target.
    offset = border_level(fixed.pixels) if cfg.border_fill else 0.0
    pyramid = build_pyramid(fixed.pixels - offset, moving.pixels - offset, fixed_mask.labels,
                            cfg.pyramid_levels, cfg.smoothing_sigma)
    n = len(pyramid)

    candidates = []
    for seed in cfg.rotation_seeds:
        z = np.zeros((2, 4))
        z[:, 1] = seed
        iters = []
        converged = False
        for k in range(n - 1, -1, -1):
            level = pyramid[k]
            obj = TwoRegionObjective(level, w)
            lo, hi = _bounds(cfg, fixed.shape)
            lr = cfg.step_size * 0.5 ** (n - 1 - k)
            max_decays = cfg.max_decays if k == 0 else cfg.coarse_max_decays
            z, loss, it, converged = _optimize_level(obj, z, lo, hi, cfg, lr, max_decays)
            iters.append(it)
        candidates.append((loss, float(np.sum(np.abs(z[:, 1]))), seed, z, tuple(iters), converged))
    candidates.sort(key=lambda c: (c[0], c[1]))
    _, _, seed, z, iters, converged = candidates[0]

    finest = TwoRegionObjective(pyramid[0], w)
    p = finest.params(z)
    p_upper, p_lower = RigidParams.from_array(p[0]), RigidParams.from_array(p[1])
    return _finalize(fixed, moving, fixed_mask, moving_mask, p_upper, p_lower, cfg, w,
                     iters, converged, seed, z, keep_warped)


def _at_bounds(z: np.ndarray, cfg: OptimizerConfig, shape) -> dict:
    lo, hi = _bounds(cfg, shape)
    names = ("dz", "dtheta", "dx", "dy")
    out = {}
    for k, region in enumerate(("upper", "lower")):
        for j, name in enumerate(names):
            tol = cfg.bound_tolerance * (hi[k, j] - lo[k, j])
            out[f"{region}_{name}"] = bool(z[k, j] <= lo[k, j] + tol or z[k, j] >= hi[k, j] - tol)
    return out


def _finalize(fixed, moving, fixed_mask, moving_mask, p_upper, p_lower, cfg, w,
              iters, converged, seed, z, keep_warped) -> RegistrationResult:
    wm = warp_moving(moving, moving_mask, p_upper, p_lower, fixed_mask)
    total, lu, ll = region_loss(fixed, RegionPair(wm.regions.upper, wm.regions.lower), fixed_mask, w)
    orig_regional, _, _ = region_loss(fixed, RegionPair(moving.pixels, moving.pixels), fixed_mask, w)
    orig_global = euclidean_loss(fixed, moving)
    overlap = 0.5 * (_dice(wm.warped_mask_upper, fixed_mask.upper) + _dice(wm.warped_mask_lower, fixed_mask.lower))
    bounds = _at_bounds(z, cfg, fixed.shape)
    # a pair already in perfect alignment has nothing to improve and is not a failure
    no_gain = total >= orig_regional and orig_regional > 0.0
    mismatch = bool(no_gain or any(bounds.values()) or overlap < cfg.min_mask_overlap)
    jsn_px, jsn_mm = jsn_progression((p_upper.dy, p_lower.dy), fixed.resolution)
    return RegistrationResult(
        p_upper=p_upper,
        p_lower=p_lower,
        original_loss_regional=orig_regional,
        original_loss_global=orig_global,
        warped_loss=total,
        warped_loss_upper=lu,
        warped_loss_lower=ll,
        jsn_pixels=jsn_px,
        jsn_mm=jsn_mm,
        resolution=fixed.resolution,
        iterations_used=tuple(iters),
        converged=bool(converged),
        at_bounds=bounds,
        mismatch=mismatch,
        mask_overlap_diagnostic=overlap,
        seed_used=seed,
        warped=wm.warped if keep_warped else None,
    )
