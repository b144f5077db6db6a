"""numba kernels. Serial loops; the summation order is fixed so results are reproducible."""
import math

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _pix(image, y, x):
    H, W = image.shape
    if x < 0 or y < 0 or x >= W or y >= H:
        return 0.0
    return image[y, x]


@njit(cache=True, inline="always")
def _sample(image, px, py):
    """Bilinear sample of the zero-padded image; returns (value, d/dx, d/dy, inside).

    ``inside`` is False once the sample is a full pixel beyond the border,
    where value and derivatives are all zero.
    """
    H, W = image.shape
    if px <= -1.0 or py <= -1.0 or px >= W or py >= H:
        return 0.0, 0.0, 0.0, False
    x0 = int(math.floor(px))
    y0 = int(math.floor(py))
    fx = px - x0
    fy = py - y0
    if x0 >= 0 and y0 >= 0 and x0 < W - 1 and y0 < H - 1:
        i00 = image[y0, x0]
        i01 = image[y0, x0 + 1]
        i10 = image[y0 + 1, x0]
        i11 = image[y0 + 1, x0 + 1]
    else:
        i00 = _pix(image, y0, x0)
        i01 = _pix(image, y0, x0 + 1)
        i10 = _pix(image, y0 + 1, x0)
        i11 = _pix(image, y0 + 1, x0 + 1)
    top = (1.0 - fx) * i00 + fx * i01
    bot = (1.0 - fx) * i10 + fx * i11
    val = (1.0 - fy) * top + fy * bot
    gx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = bot - top
    return val, gx, gy, True


@njit(cache=True)
def warp_affine(image, inv, out):
    H, W = image.shape
    cx = (W - 1) * 0.5
    cy = (H - 1) * 0.5
    for row in range(H):
        v = row - cy
        for col in range(W):
            u = col - cx
            sx = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2] + cx
            sy = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2] + cy
            val, gx, gy, inside = _sample(image, sx, sy)
            out[row, col] = val
    return out


@njit(cache=True)
def warp_nearest(labels, inv, out):
    H, W = labels.shape
    cx = (W - 1) * 0.5
    cy = (H - 1) * 0.5
    for row in range(H):
        v = row - cy
        for col in range(W):
            u = col - cx
            sx = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2] + cx
            sy = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2] + cy
            ix = int(math.floor(sx + 0.5))
            iy = int(math.floor(sy + 0.5))
            if ix < 0 or iy < 0 or ix > W - 1 or iy > H - 1:
                out[row, col] = 0
            else:
                out[row, col] = labels[iy, ix]
    return out


@njit(cache=True)
def warp_jacobian(image, params, out_val, out_jac):
    H, W = image.shape
    cx = (W - 1) * 0.5
    cy = (H - 1) * 0.5
    dz = params[0]
    c = math.cos(params[1])
    s = math.sin(params[1])
    dx = params[2]
    dy = params[3]
    rz = 1.0 / dz
    for row in range(H):
        v = row - cy
        for col in range(W):
            u = col - cx
            ru = (c * u + s * v) * rz
            rv = (c * v - s * u) * rz
            val, gx, gy, inside = _sample(image, ru - dx + cx, rv - dy + cy)
            out_val[row, col] = val
            if inside:
                out_jac[0, row, col] = -(gx * ru + gy * rv) * rz
                out_jac[1, row, col] = gx * rv - gy * ru
                out_jac[2, row, col] = -gx
                out_jac[3, row, col] = -gy
            else:
                out_jac[0, row, col] = 0.0
                out_jac[1, row, col] = 0.0
                out_jac[2, row, col] = 0.0
                out_jac[3, row, col] = 0.0
    return out_val, out_jac


@njit(cache=True)
def region_objective(fixed, moving, region, params, grad):
    H, W = fixed.shape
    cx = (W - 1) * 0.5
    cy = (H - 1) * 0.5
    dz = params[0]
    c = math.cos(params[1])
    s = math.sin(params[1])
    dx = params[2]
    dy = params[3]
    rz = 1.0 / dz
    ssq = 0.0
    g0 = 0.0
    g1 = 0.0
    g2 = 0.0
    g3 = 0.0
    for row in range(H):
        v = row - cy
        for col in range(W):
            if not region[row, col]:
                continue
            u = col - cx
            ru = (c * u + s * v) * rz
            rv = (c * v - s * u) * rz
            val, gx, gy, inside = _sample(moving, ru - dx + cx, rv - dy + cy)
            r = val - fixed[row, col]
            ssq += r * r
            if inside:
                g0 -= r * (gx * ru + gy * rv) * rz
                g1 += r * (gx * rv - gy * ru)
                g2 -= r * gx
                g3 -= r * gy
    grad[0] = g0
    grad[1] = g1
    grad[2] = g2
    grad[3] = g3
    return ssq
