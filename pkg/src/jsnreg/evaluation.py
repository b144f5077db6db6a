"""Reliability metrics over joint series and batches of registrations.

* consistency sigma: spread of JSN(F, G) recomputed through intermediate
  images I as JSN(F, I) + JSN(I, G);
* perturbation sigma': spread of JSN(F, G_j) where G_j is G translated by a
  random sub-pixel shift in [-3, 3] px on each axis;
* mismatch ratio, warped-loss statistics and the fraction of pairs whose
  warped loss is below half the original loss.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .baseline import phase_correlation_baseline
from .imaging import JointImage, SegmentationMask
from .loss import LossWeights
from .registration import OptimizerConfig, RegistrationResult, register_pair
from .transform import RigidParams, build_matrix, warp, warp_labels

log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class JointSeries:
    """Time-ordered images of one joint, with one mask per image."""

    joint_id: str
    images: tuple
    masks: tuple
    resolution: float | None = None

    def __post_init__(self):
        images, masks = tuple(self.images), tuple(self.masks)
        if len(images) != len(masks):
            raise ValueError("one mask per image is required")
        if len(images) < 3:
            raise ValueError("a series needs at least three images")
        shape = images[0].shape
        for img, m in zip(images, masks):
            if img.shape != shape:
                raise ValueError("series images must share one size")
            m.check_matches(img)
        res = images[0].resolution if self.resolution is None else self.resolution
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "resolution", float(res))

    def __len__(self):
        return len(self.images)


@dataclass(frozen=True)
class EvaluationRecord:
    pair_id: str = ""
    sigma_mm: float | None = None
    sigma_prime_mm: float | None = None
    mismatch_ratio: float | None = None
    mean_warped_loss: float | None = None
    mean_original_loss: float | None = None
    half_loss_fraction: float | None = None
    n_pairs: int = 0


@dataclass(frozen=True)
class SigmaResult:
    sigma_pixels: float
    sigma_mm: float
    mean_jsn: float
    values: tuple
    intermediates: tuple
    excluded: tuple


@dataclass(frozen=True)
class SigmaPrimeResult:
    sigma_prime_pixels: float
    sigma_prime_mm: float
    used: int
    values: tuple
    kept: tuple
    translations: tuple


class RegistrationCache:
    """Memoises series registrations by (fixed index, moving index)."""

    def __init__(self, series: JointSeries, cfg: OptimizerConfig, w: LossWeights = LossWeights()):
        self.series = series
        self.cfg = cfg
        self.w = w
        self._store: dict[tuple[int, int], RegistrationResult] = {}

    def __call__(self, i: int, j: int) -> RegistrationResult:
        key = (i, j)
        if key not in self._store:
            s = self.series
            self._store[key] = register_pair(s.images[i], s.images[j], s.masks[i], s.masks[j], self.cfg, self.w)
        return self._store[key]

    def store(self, i: int, j: int, result: RegistrationResult) -> None:
        """Preload a result computed elsewhere, e.g. in a worker process."""
        self._store[(i, j)] = result

    def __len__(self):
        return len(self._store)


def population_std(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.sqrt(np.mean((v - v.mean()) ** 2)))


def consistency_values(jsn_of, n: int, f_index: int, g_index: int):
    """Indirect JSN(F, G) through every other index, for any pairwise estimator.

    ``jsn_of(i, j)`` returns ``(jsn_pixels, mismatch)``. Returns the values,
    the intermediates used and the intermediates excluded by a mismatch.
    """
    values, used, excluded = [], [], []
    for i in range(n):
        if i in (f_index, g_index):
            continue
        (a, bad_a), (b, bad_b) = jsn_of(f_index, i), jsn_of(i, g_index)
        if bad_a or bad_b:
            excluded.append(i)
            log.info("intermediate %d excluded: mismatched component registration", i)
            continue
        values.append(a + b)
        used.append(i)
    return values, used, excluded


def sigma_consistency(series: JointSeries, f_index: int, g_index: int,
                      cfg: OptimizerConfig = OptimizerConfig(), w: LossWeights = LossWeights(),
                      cache: RegistrationCache | None = None) -> SigmaResult:
    """Consistency of JSN(F, G) through every other image of the series."""
    cache = cache if cache is not None else RegistrationCache(series, cfg, w)

    def jsn_of(i, j):
        r = cache(i, j)
        return r.jsn_pixels, r.mismatch

    values, used, excluded = consistency_values(jsn_of, len(series), f_index, g_index)
    if not values:
        raise EvaluationError("no valid intermediates remain after mismatch exclusion")
    sigma = population_std(values)
    return SigmaResult(sigma, sigma * series.resolution, float(np.mean(values)),
                       tuple(values), tuple(used), tuple(excluded))


def translate(image: JointImage, mask: SegmentationMask, ex: float, ey: float):
    """Shift an image (bilinear) and its mask (nearest) by (ex, ey) pixels."""
    t = build_matrix(RigidParams(1.0, 0.0, ex, ey))
    labels = warp_labels(mask.labels, t)
    return warp(image, t), SegmentationMask(labels)


def robust_keep(values, mad_factor: float = 3.0, floor: float = 0.1) -> np.ndarray:
    """Boolean keep-mask: drop values further than max(mad_factor * MAD, floor) from the median."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return np.zeros(0, dtype=bool)
    med = np.median(v)
    mad = np.median(np.abs(v - med))
    return np.abs(v - med) <= max(mad_factor * mad, floor)


def draw_translations(rng_seed: int, n: int = 10, max_shift: float = 3.0) -> list[tuple[float, float]]:
    rng = np.random.default_rng(rng_seed)
    return [tuple(map(float, t)) for t in rng.uniform(-max_shift, max_shift, size=(n, 2))]


def perturbation_sigma(estimate, moving: JointImage, moving_mask: SegmentationMask, translations,
                       resolution: float, mad_factor: float = 3.0, outlier_floor: float = 0.1,
                       min_survivors: int = 3) -> SigmaPrimeResult:
    """Spread of ``estimate(moving_j, mask_j) -> (jsn, mismatch)`` over translated copies of moving."""
    translations = [tuple(map(float, t)) for t in translations]
    values, ok = [], []
    for ex, ey in translations:
        mov_j, mask_j = translate(moving, moving_mask, ex, ey)
        try:
            jsn, bad = estimate(mov_j, mask_j)
        except ValueError as exc:
            log.warning("perturbation (%.3f, %.3f) failed: %s", ex, ey, exc)
            jsn, bad = math.nan, True
        values.append(float(jsn))
        ok.append(not bad)
    ok = np.array(ok, dtype=bool)
    vals = np.array(values)
    keep = ok.copy()
    keep[ok] = robust_keep(vals[ok], mad_factor, outlier_floor)
    if keep.sum() < min_survivors:
        raise EvaluationError(f"only {int(keep.sum())} perturbations survived outlier removal")
    s = population_std(vals[keep])
    return SigmaPrimeResult(s, s * resolution, int(keep.sum()), tuple(values),
                            tuple(bool(k) for k in keep), tuple(translations))


def sigma_prime(fixed: JointImage, moving: JointImage, fixed_mask: SegmentationMask,
                moving_mask: SegmentationMask, cfg: OptimizerConfig = OptimizerConfig(),
                w: LossWeights = LossWeights(), rng_seed: int | None = None, n: int = 10,
                max_shift: float = 3.0, translations=None, mad_factor: float = 3.0,
                outlier_floor: float = 0.1, min_survivors: int = 3) -> SigmaPrimeResult:
    """JSN spread under random translations of the moving image.

    ``translations`` overrides the seeded uniform draws. Mismatched
    registrations and robust outliers are dropped before the population
    standard deviation is taken.
    """
    if translations is None:
        translations = draw_translations(cfg.rng_seed if rng_seed is None else rng_seed, n, max_shift)

    def estimate(mov_j, mask_j):
        r = register_pair(fixed, mov_j, fixed_mask, mask_j, cfg, w)
        return r.jsn_pixels, r.mismatch

    return perturbation_sigma(estimate, moving, moving_mask, translations, fixed.resolution,
                              mad_factor, outlier_floor, min_survivors)


def baseline_sigma_prime(fixed: JointImage, moving: JointImage, fixed_mask: SegmentationMask,
                         moving_mask: SegmentationMask, translations, **kw) -> SigmaPrimeResult:
    """The same perturbation protocol applied to the phase-correlation baseline."""

    def estimate(mov_j, mask_j):
        r = phase_correlation_baseline(fixed, mov_j, fixed_mask)
        return r.jsn_pixels, r.mismatch

    return perturbation_sigma(estimate, moving, moving_mask, translations, fixed.resolution, **kw)


# ---------------------------------------------------------------- batches


@dataclass(frozen=True, eq=False)
class RegistrationTask:
    fixed: JointImage
    moving: JointImage
    fixed_mask: SegmentationMask
    moving_mask: SegmentationMask
    pair_id: str = ""
    truth_jsn_pixels: float | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class BatchOutcome:
    record: EvaluationRecord
    results: tuple  # RegistrationResult or None per task, in task order
    errors: tuple


def _run_task(args):
    task, cfg, w = args
    try:
        return register_pair(task.fixed, task.moving, task.fixed_mask, task.moving_mask, cfg, w), None
    except ValueError as exc:
        return None, str(exc)


def map_tasks(fn, items, jobs: int = 1):
    """Order-preserving map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def batch_evaluate(tasks, cfg: OptimizerConfig = OptimizerConfig(), w: LossWeights = LossWeights(),
                   jobs: int = 1, pair_id: str = "batch") -> BatchOutcome:
    """Register every task; failed registrations count as mismatches."""
    tasks = list(tasks)
    if not tasks:
        raise EvaluationError("empty batch")
    out = map_tasks(_run_task, [(t, cfg, w) for t in tasks], jobs)
    results = tuple(r for r, _ in out)
    errors = tuple(e for _, e in out)
    mism = [r is None or r.mismatch for r in results]
    good = [r for r in results if r is not None and not r.mismatch]
    half = [r is not None and r.warped_loss < 0.5 * r.original_loss_regional for r in results]
    rec = EvaluationRecord(
        pair_id=pair_id,
        mismatch_ratio=sum(mism) / len(tasks),
        mean_warped_loss=float(np.mean([r.warped_loss for r in good])) if good else None,
        mean_original_loss=float(np.mean([r.original_loss_regional for r in good])) if good else None,
        half_loss_fraction=sum(half) / len(tasks),
        n_pairs=len(tasks),
    )
    return BatchOutcome(rec, results, errors)
