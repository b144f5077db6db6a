"""Pure-numpy kernels, numerically equivalent to the numba ones (up to summation order)."""
import numpy as np


def _grid(shape):
    H, W = shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    return u - (W - 1) * 0.5, v - (H - 1) * 0.5


def _sample(image, px, py):
    """Bilinear sample of the zero-padded image at index coordinates."""
    H, W = image.shape
    inside = (px > -1.0) & (py > -1.0) & (px < W) & (py < H)
    pxc = np.where(inside, px, 0.0)
    pyc = np.where(inside, py, 0.0)
    x0 = np.floor(pxc).astype(np.intp)
    y0 = np.floor(pyc).astype(np.intp)
    fx = pxc - x0
    fy = pyc - y0
    padded = np.pad(image, 1)
    # index 0 of the padded array is pixel -1
    i00 = padded[y0 + 1, x0 + 1]
    i01 = padded[y0 + 1, x0 + 2]
    i10 = padded[y0 + 2, x0 + 1]
    i11 = padded[y0 + 2, x0 + 2]
    top = (1.0 - fx) * i00 + fx * i01
    bot = (1.0 - fx) * i10 + fx * i11
    val = (1.0 - fy) * top + fy * bot
    gx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = bot - top
    val[~inside] = 0.0
    gx[~inside] = 0.0
    gy[~inside] = 0.0
    return val, gx, gy, inside


def _source(shape, inv, u, v):
    H, W = shape
    sx = inv[0, 0] * u + inv[0, 1] * v + inv[0, 2] + (W - 1) * 0.5
    sy = inv[1, 0] * u + inv[1, 1] * v + inv[1, 2] + (H - 1) * 0.5
    return sx, sy


def warp_affine(image, inv, out):
    u, v = _grid(image.shape)
    val, _, _, _ = _sample(image, *_source(image.shape, inv, u, v))
    out[...] = val
    return out


def warp_nearest(labels, inv, out):
    H, W = labels.shape
    u, v = _grid(labels.shape)
    sx, sy = _source(labels.shape, inv, u, v)
    ix = np.floor(sx + 0.5).astype(np.intp)
    iy = np.floor(sy + 0.5).astype(np.intp)
    inside = (ix >= 0) & (iy >= 0) & (ix <= W - 1) & (iy <= H - 1)
    out[...] = 0
    out[inside] = labels[iy[inside], ix[inside]]
    return out


def _mapped(params, u, v):
    dz, theta, dx, dy = params
    c, s = np.cos(theta), np.sin(theta)
    ru = (c * u + s * v) / dz
    rv = (c * v - s * u) / dz
    return ru, rv


def warp_jacobian(image, params, out_val, out_jac):
    H, W = image.shape
    u, v = _grid(image.shape)
    ru, rv = _mapped(params, u, v)
    val, gx, gy, _ = _sample(image, ru - params[2] + (W - 1) * 0.5, rv - params[3] + (H - 1) * 0.5)
    out_val[...] = val
    out_jac[0] = -(gx * ru + gy * rv) / params[0]
    out_jac[1] = gx * rv - gy * ru
    out_jac[2] = -gx
    out_jac[3] = -gy
    return out_val, out_jac


def region_objective(fixed, moving, region, params, grad):
    H, W = fixed.shape
    rows, cols = np.nonzero(region)
    u = cols - (W - 1) * 0.5
    v = rows - (H - 1) * 0.5
    ru, rv = _mapped(params, u, v)
    val, gx, gy, _ = _sample(moving, ru - params[2] + (W - 1) * 0.5, rv - params[3] + (H - 1) * 0.5)
    r = val - fixed[rows, cols]
    grad[0] = -np.sum(r * (gx * ru + gy * rv)) / params[0]
    grad[1] = np.sum(r * (gx * rv - gy * ru))
    grad[2] = -np.sum(r * gx)
    grad[3] = -np.sum(r * gy)
    return float(np.sum(r * r))
