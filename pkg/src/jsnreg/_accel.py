"""Backend selection for the hot pixel loops.

The numba kernels are used when numba imports cleanly and the environment
variable ``JSNREG_DISABLE_NUMBA`` is unset (or ``0``). Otherwise the
vectorised numpy kernels are used. Both backends expose the same functions
with identical signatures:

``warp_affine(image, inv, out)``
    bilinear inverse warp of the zero-padded image; ``inv`` is the 2x3 map from
    centre-origin output coordinates to centre-origin source coordinates.
``warp_nearest(labels, inv, out)``
    nearest-neighbour version for uint8 label grids.
``warp_jacobian(image, params, out_val, out_jac)``
    warped values plus d(value)/d(dz, dtheta, dx, dy) per pixel.
``region_objective(fixed, moving, region, params, grad)``
    sum of squared residuals over ``region``; ``grad`` receives the
    parameter gradient of half that sum.
"""
import os

_flag = os.environ.get("JSNREG_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

BACKEND = "numpy"
if not _disabled:
    try:
        from . import _kernels_numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = None
if BACKEND == "numpy":
    from . import _kernels_numpy as _impl

warp_affine = _impl.warp_affine
warp_nearest = _impl.warp_nearest
warp_jacobian = _impl.warp_jacobian
region_objective = _impl.region_objective


def get_backend(name=None):
    """Return the kernel module for ``name`` ("numba" / "numpy"), or the active one."""
    if name is None:
        return _impl
    if name == "numba":
        from . import _kernels_numba

        return _kernels_numba
    if name == "numpy":
        from . import _kernels_numpy

        return _kernels_numpy
    raise ValueError(f"unknown backend {name!r}")
