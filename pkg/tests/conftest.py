import math
import sys

import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from jsnreg.phantom import PhantomSpec, generate_pair
from jsnreg.transform import RigidParams, invert, warp_array


def in_bounds(shape, t):
    """Output pixels whose inverse-mapped sample lands inside the input grid."""
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    u -= (w - 1) / 2.0
    v -= (h - 1) / 2.0
    ti = invert(t)
    x = ti[0, 0] * u + ti[0, 1] * v + ti[0, 2] + (w - 1) / 2.0
    y = ti[1, 0] * u + ti[1, 1] * v + ti[1, 2] + (h - 1) / 2.0
    return (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)


def chain_interior(shape, t1, t2):
    """Pixels of warp(warp(., t1), t2) whose whole bilinear stencil came from in-bounds samples."""
    v1 = binary_erosion(in_bounds(shape, t1), np.ones((3, 3)))
    return warp_array(v1.astype(np.float64), t2) >= 1.0 - 1e-12


def rigid(dz=1.0, deg=0.0, dx=0.0, dy=0.0):
    return RigidParams(dz, math.radians(deg), dx, dy)


@pytest.fixture(scope="session")
def identical_pair():
    return generate_pair(PhantomSpec(width=128, height=128, rng_seed=11))


@pytest.fixture(scope="session")
def shifted_lower_pair():
    return generate_pair(PhantomSpec(truth_lower=RigidParams(dy=1.5), rng_seed=2))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
