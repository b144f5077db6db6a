"""Four-parameter rigid/similarity transforms and bilinear warping.

A parameter set (dz, dtheta, dx, dy) builds the homogeneous matrix

    t = dz * R(dtheta) @ T(dx, dy)

i.e. translate first, then rotate and scale. Coordinates are measured from
the image centre ((W-1)/2, (H-1)/2) with y pointing down. Warping is done by
inverse mapping: output pixel q takes the bilinear sample of the input at
t^-1 q. The input counts as zero beyond its border, so a sample fades to 0
over the last pixel and is exactly 0 further out; integer shifts stay exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _accel
from .imaging import JointImage

CONVENTION = "t = dz*R(dtheta)*T(dx,dy); centre origin, y down; warp samples input at t^-1 q"


@dataclass(frozen=True)
class RigidParams:
    """Scale ``dz``, rotation ``dtheta`` (radians), shifts ``dx``, ``dy`` (pixels)."""

    dz: float = 1.0
    dtheta: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite transform parameters: {vals}")
        if self.dz <= 0:
            raise ValueError(f"dz must be positive, got {self.dz}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dz, self.dtheta, self.dx, self.dy], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "RigidParams":
        return cls(*(float(x) for x in a))

    @classmethod
    def identity(cls) -> "RigidParams":
        return cls()

    def to_dict(self) -> dict:
        return {"dz": self.dz, "dtheta_rad": self.dtheta, "dtheta_deg": math.degrees(self.dtheta),
                "dx_px": self.dx, "dy_px": self.dy}

    def scaled(self, factor: float) -> "RigidParams":
        """Same motion expressed on a grid whose pixels are ``1/factor`` as large."""
        return RigidParams(self.dz, self.dtheta, self.dx * factor, self.dy * factor)


def build_matrix(p: RigidParams) -> np.ndarray:
    c, s = math.cos(p.dtheta), math.sin(p.dtheta)
    zc, zs = p.dz * c, p.dz * s
    return np.array([
        [zc, -zs, p.dx * zc - p.dy * zs],
        [zs, zc, p.dx * zs + p.dy * zc],
        [0.0, 0.0, 1.0],
    ])


def invert(t: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a similarity matrix (block A, translation b)."""
    t = np.asarray(t, dtype=np.float64)
    a = t[:2, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if not det > 0:
        raise ValueError("matrix is not an orientation-preserving similarity")
    ainv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    out = np.eye(3)
    out[:2, :2] = ainv
    out[:2, 2] = -ainv @ t[:2, 2]
    return out


def params_from_matrix(t: np.ndarray) -> RigidParams:
    """Recover (dz, dtheta, dx, dy) from a matrix built by :func:`build_matrix`."""
    t = np.asarray(t, dtype=np.float64)
    dz = math.hypot(t[0, 0], t[1, 0])
    theta = math.atan2(t[1, 0], t[0, 0])
    # t[:2, 2] = dz R d  ->  d = R^T t / dz
    d = t[:2, :2].T @ t[:2, 2] / (dz * dz)
    return RigidParams(dz, theta, float(d[0]), float(d[1]))


def warp_array(pixels: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Bilinear inverse warp of a float array by matrix ``t`` (zero fill)."""
    inv = np.ascontiguousarray(invert(t)[:2], dtype=np.float64)
    src = np.ascontiguousarray(pixels, dtype=np.float64)
    return _accel.warp_affine(src, inv, np.empty_like(src))


def warp(image: JointImage, t: np.ndarray) -> JointImage:
    """Warp ``image`` by matrix ``t``; resolution and identity are kept."""
    out = warp_array(image.pixels, t)
    return JointImage(np.clip(out, 0.0, 1.0), image.resolution, image.identity)


def warp_labels(labels: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Nearest-neighbour warp of an integer label/indicator grid (zero fill)."""
    inv = np.ascontiguousarray(invert(t)[:2], dtype=np.float64)
    src = np.ascontiguousarray(labels, dtype=np.uint8)
    return _accel.warp_nearest(src, inv, np.empty_like(src))


def warp_gradient(image: JointImage | np.ndarray, p: RigidParams) -> tuple[np.ndarray, np.ndarray]:
    """Warped image and its per-pixel sensitivity to each parameter.

    Returns ``(values, jac)`` where ``jac[k]`` is d(warped value)/d(param k) for
    k in (dz, dtheta, dx, dy). Pixels sampled outside the input get zero.
    """
    px = image.pixels if isinstance(image, JointImage) else np.asarray(image, dtype=np.float64)
    px = np.ascontiguousarray(px, dtype=np.float64)
    val = np.empty_like(px)
    jac = np.empty((4,) + px.shape)
    _accel.warp_jacobian(px, p.as_array(), val, jac)
    return val, jac
