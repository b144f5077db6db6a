"""Synthetic two-bone joint phantoms with exact ground truth.

Each bone is a rounded rectangle with a bright cortical rim and a textured
interior. Images are rendered analytically: pixel q of an image whose
region transforms are (T_upper, T_lower) shows the reference scene at
T_region q. Registering such a moving image against the untransformed
fixed image therefore recovers exactly (T_upper, T_lower).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfc

from .imaging import JointImage, SegmentationMask
from .transform import RigidParams, build_matrix, invert

N_TEXTURE_MODES = 64


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 256
    height: int = 256
    bone_half_width: float = 30.0
    gap: float = 24.0
    cortical_rim_intensity: float = 0.9
    interior_base_intensity: float = 0.55
    texture_amplitude: float = 0.15
    texture_correlation_length: float = 6.0
    background_intensity: float = 0.10
    noise_sigma: float = 0.0
    rng_seed: int = 0
    truth_upper: RigidParams = field(default_factory=RigidParams)
    truth_lower: RigidParams = field(default_factory=RigidParams)
    bone_length: float | None = None
    corner_radius: float | None = None
    rim_width: float = 2.0
    texture_perturbation: float = 0.0
    resolution: float = 0.175
    edge_sigma: float = 0.6

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise PhantomError("phantom must be at least 16x16")
        if self.gap < 1:
            raise PhantomError(f"gap must be at least 1 px, got {self.gap}")
        if self.edge_sigma < 0:
            raise PhantomError("edge_sigma must be non-negative")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be non-negative")
        for name in ("cortical_rim_intensity", "interior_base_intensity", "background_intensity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise PhantomError(f"{name} must lie in [0, 1]")
        if self.bone_half_width <= 0 or self.length <= 0:
            raise PhantomError("bone dimensions must be positive")
        if not 0 <= self.radius <= min(self.bone_half_width, self.length / 2):
            raise PhantomError("corner radius exceeds bone half-size")

    @property
    def length(self) -> float:
        if self.bone_length is not None:
            return float(self.bone_length)
        return 0.8 * (self.height / 2.0 - self.gap / 2.0)

    @property
    def radius(self) -> float:
        return self.bone_half_width / 2.0 if self.corner_radius is None else float(self.corner_radius)

    def bone_centers(self) -> tuple[tuple[float, float], tuple[float, float]]:
        off = self.gap / 2.0 + self.length / 2.0
        return (0.0, -off), (0.0, off)

    def bone_area(self) -> float:
        """Analytic area of one rounded-rectangle bone."""
        w, l, r = 2 * self.bone_half_width, self.length, self.radius
        return w * l - (4.0 - math.pi) * r * r


@dataclass(frozen=True, eq=False)
class PhantomPair:
    fixed: JointImage
    moving: JointImage
    fixed_mask: SegmentationMask
    moving_mask: SegmentationMask
    truth_upper: RigidParams
    truth_lower: RigidParams
    truth_jsn_pixels: float

    def metadata(self) -> dict:
        return {
            "truth_upper": self.truth_upper.to_dict(),
            "truth_lower": self.truth_lower.to_dict(),
            "truth_jsn_px": self.truth_jsn_pixels,
            "truth_jsn_mm": self.truth_jsn_pixels * self.fixed.resolution,
            "resolution_mm_per_px": self.fixed.resolution,
        }


# ----------------------------------------------------------------- scene


class _Texture:
    """Band-limited random field with Gaussian covariance, evaluable anywhere."""

    def __init__(self, rng: np.random.Generator, corr_length: float, n_modes: int = N_TEXTURE_MODES):
        self.k = rng.normal(0.0, 1.0 / corr_length, size=(n_modes, 2))
        self.phase = rng.uniform(0.0, 2 * math.pi, size=n_modes)
        self.scale = math.sqrt(2.0 / n_modes)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for (kx, ky), ph in zip(self.k, self.phase):
            out += np.cos(kx * x + ky * y + ph)
        return out * self.scale


def _rounded_box_sdf(x, y, half_w, half_l, r):
    qx = np.abs(x) - (half_w - r)
    qy = np.abs(y) - (half_l - r)
    outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
    inside = np.minimum(np.maximum(qx, qy), 0.0)
    return outside + inside - r


def _coverage(sd, sigma=0.6):
    """Fraction of a pixel inside the shape, for a Gaussian imaging blur of ``sigma`` px.

    ``sigma = 0`` gives the box-filter ramp one pixel wide.
    """
    if sigma <= 0:
        return np.clip(0.5 - sd, 0.0, 1.0)
    return 0.5 * erfc(sd / (math.sqrt(2.0) * sigma))


def _center_grid(width, height):
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u - (width - 1) / 2.0, v - (height - 1) / 2.0


def _map(t: np.ndarray, u, v):
    return t[0, 0] * u + t[0, 1] * v + t[0, 2], t[1, 0] * u + t[1, 1] * v + t[1, 2]


def bone_coverage(spec: PhantomSpec, bone: int, params: RigidParams = RigidParams()) -> np.ndarray:
    """Antialiased coverage of bone 0 (upper) or 1 (lower) seen through ``params``."""
    u, v = _center_grid(spec.width, spec.height)
    x, y = _map(build_matrix(params), u, v)
    cx, cy = spec.bone_centers()[bone]
    sd = _rounded_box_sdf(x - cx, y - cy, spec.bone_half_width, spec.length / 2, spec.radius)
    return _coverage(sd, spec.edge_sigma)


class _Scene:
    def __init__(self, spec: PhantomSpec, rng: np.random.Generator):
        self.spec = spec
        self.texture = _Texture(rng, spec.texture_correlation_length)

    def bone_contribution(self, bone, x, y, perturb=None):
        """Intensity above background of one bone at reference-frame points (x, y)."""
        s = self.spec
        cx, cy = s.bone_centers()[bone]
        sd = _rounded_box_sdf(x - cx, y - cy, s.bone_half_width, s.length / 2, s.radius)
        outer = _coverage(sd, s.edge_sigma)
        inner = _coverage(sd + s.rim_width, s.edge_sigma)
        interior = s.interior_base_intensity + s.texture_amplitude * self.texture(x, y)
        if perturb is not None:
            interior = interior + s.texture_perturbation * perturb(x, y)
        bg = s.background_intensity
        return (s.cortical_rim_intensity - bg) * (outer - inner) + (interior - bg) * inner

    def render(self, upper: RigidParams, lower: RigidParams, perturb=None) -> np.ndarray:
        s = self.spec
        u, v = _center_grid(s.width, s.height)
        img = np.full((s.height, s.width), s.background_intensity)
        for bone, p in ((0, upper), (1, lower)):
            x, y = _map(build_matrix(p), u, v)
            img += self.bone_contribution(bone, x, y, perturb)
        return img


def _check_in_frame(spec: PhantomSpec, params: RigidParams, margin: float = 1.0):
    """True when both bones, pulled back through ``params``, stay inside the frame."""
    hw, hl = spec.bone_half_width, spec.length / 2
    tinv = invert(build_matrix(params))
    lim_x = (spec.width - 1) / 2.0 - margin
    lim_y = (spec.height - 1) / 2.0 - margin
    for cx, cy in spec.bone_centers():
        corners = np.array([[cx + sx * hw, cy + sy * hl, 1.0] for sx in (-1, 1) for sy in (-1, 1)])
        q = corners @ tinv.T
        if np.any(np.abs(q[:, 0]) > lim_x) or np.any(np.abs(q[:, 1]) > lim_y):
            return False
    return True


def split_mask(width: int, height: int, split_y: float = 0.0) -> SegmentationMask:
    """Label 1 below the horizontal line ``v = split_y`` (centre-origin rows)."""
    v = np.arange(height) - (height - 1) / 2.0
    labels = np.repeat((v > split_y)[:, None], width, axis=1).astype(np.uint8)
    return SegmentationMask(labels)


def render_series(spec: PhantomSpec, transforms: list[tuple[RigidParams, RigidParams]],
                  identity_prefix: str = "phantom") -> list[JointImage]:
    """Render one image per (upper, lower) transform pair from a shared scene.

    Registering image j (moving) against image i (fixed) recovers
    ``T_i^-1 T_j`` per region.
    """
    rng = np.random.default_rng(spec.rng_seed)
    scene = _Scene(spec, rng)
    out = []
    for k, (up, lo) in enumerate(transforms):
        if not (_check_in_frame(spec, up) and _check_in_frame(spec, lo)):
            raise PhantomError(f"bones out of frame for image {k}")
        perturb = None
        if k > 0 and spec.texture_perturbation > 0:
            perturb = _Texture(rng, spec.texture_correlation_length)
        img = scene.render(up, lo, perturb)
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        out.append(JointImage(np.clip(img, 0.0, 1.0), spec.resolution, f"{identity_prefix}_{k}"))
    return out


def generate_pair(spec: PhantomSpec) -> PhantomPair:
    """Render a fixed image (identity) and a moving image whose regions carry the truth transforms."""
    ident = RigidParams()
    fixed, moving = render_series(spec, [(ident, ident), (spec.truth_upper, spec.truth_lower)])
    mask = split_mask(spec.width, spec.height)
    return PhantomPair(
        fixed=fixed,
        moving=moving,
        fixed_mask=mask,
        moving_mask=mask,
        truth_upper=spec.truth_upper,
        truth_lower=spec.truth_lower,
        truth_jsn_pixels=spec.truth_upper.dy - spec.truth_lower.dy,
    )


def smooth_pair(size: int = 512, blob_sigma: float = 24.0, n_blobs: int = 10, rng_seed: int = 0,
                truth_upper: RigidParams = RigidParams(), truth_lower: RigidParams = RigidParams(),
                resolution: float = 0.175) -> PhantomPair:
    """A pair built from wide Gaussian blobs that vanish at the frame border.

    Blobs above the centre line follow ``truth_upper``, the rest ``truth_lower``.
    Every image is smooth on the pixel scale, which keeps finite-difference
    checks of the bilinear objective from being dominated by its kinks.
    """
    rng = np.random.default_rng(rng_seed)
    centres = rng.uniform(-0.22 * size, 0.22 * size, size=(n_blobs, 2))
    amps = rng.uniform(0.1, 0.3, size=n_blobs)
    u, v = _center_grid(size, size)

    def render(upper, lower):
        img = np.zeros((size, size))
        for (cx, cy), a in zip(centres, amps):
            x, y = _map(build_matrix(upper if cy < 0 else lower), u, v)
            img += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * blob_sigma ** 2))
        return JointImage(np.clip(img, 0.0, 1.0), resolution)

    mask = split_mask(size, size)
    return PhantomPair(render(RigidParams(), RigidParams()), render(truth_upper, truth_lower), mask, mask,
                       truth_upper, truth_lower, truth_upper.dy - truth_lower.dy)


def random_truth(rng: np.random.Generator, max_shift=5.0, max_theta_deg=10.0,
                 dz_range=(0.95, 1.05), min_theta_deg=0.0) -> RigidParams:
    """Draw a parameter set uniformly within the given ranges."""
    theta = rng.uniform(math.radians(min_theta_deg), math.radians(max_theta_deg)) * rng.choice([-1.0, 1.0])
    return RigidParams(
        dz=rng.uniform(*dz_range),
        dtheta=theta,
        dx=rng.uniform(-max_shift, max_shift),
        dy=rng.uniform(-max_shift, max_shift),
    )


# ------------------------------------------------------------ segmentation


class SegmentationError(ValueError):
    pass


def heuristic_segment(image: JointImage, contrast_ratio: float = 0.5) -> SegmentationMask:
    """Split a joint image at the emptiest row between two bright bands.

    Otsu-binarises the image, takes the row profile of bright pixels and
    places the split in the middle of the run of minimal rows inside the
    central half of the image. Fails when the minimum is not clearly lower
    than the bright bands on both sides.
    """
    from skimage.filters import threshold_otsu

    px = image.pixels
    H, W = px.shape
    if px.max() - px.min() < 1e-12:
        raise SegmentationError("cannot split: uniform image")
    binary = px > threshold_otsu(px)
    profile = binary.sum(axis=1).astype(np.float64)
    lo, hi = H // 4, H - H // 4
    mid = profile[lo:hi]
    pmin = mid.min()
    above, below = profile[:lo + int(np.argmin(mid))], profile[lo + int(np.argmin(mid)):]
    if above.size == 0 or below.size == 0:
        raise SegmentationError("cannot split: no interior minimum")
    peak = min(above.max(), below.max())
    if peak <= 0 or pmin > contrast_ratio * peak:
        raise SegmentationError("cannot split: no interior minimum")
    # centre of the contiguous run of minimal rows around the first minimum
    start = lo + int(np.argmin(mid))
    end = start
    while end + 1 < hi and profile[end + 1] == pmin:
        end += 1
    split_row = (start + end) / 2.0
    labels = np.zeros((H, W), dtype=np.uint8)
    labels[np.arange(H) > split_row] = 1
    return SegmentationMask(labels)


def segmentation_metrics(predicted: SegmentationMask, truth: SegmentationMask) -> dict:
    """mIoU, SEN, SPC, DSC, ACC with label 1 as the positive class."""
    if predicted.shape != truth.shape:
        raise ValueError(f"dimension mismatch: {predicted.shape} vs {truth.shape}")
    p = predicted.labels.astype(bool)
    t = truth.labels.astype(bool)
    tp = int(np.sum(p & t))
    tn = int(np.sum(~p & ~t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))

    def ratio(num, den):
        return num / den if den else 1.0

    iou1 = ratio(tp, tp + fp + fn)
    iou0 = ratio(tn, tn + fn + fp)
    return {
        "mIoU": (iou0 + iou1) / 2.0,
        "SEN": ratio(tp, tp + fn),
        "SPC": ratio(tn, tn + fp),
        "DSC": ratio(2 * tp, 2 * tp + fp + fn),
        "ACC": (tp + tn) / p.size,
        "TP": tp, "TN": tn, "FP": fp, "FN": fn,
    }
