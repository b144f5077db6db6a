"""Time the numba kernels against the numpy fallback and check they agree.

    python3 benchmarks/bench_kernels.py [--size 256] [--repeat 20] [--pairs 3]

The first numba call compiles (or loads the on-disk cache) and is timed
separately. ``--pairs`` also times whole registrations under each backend by
running a subprocess with JSNREG_DISABLE_NUMBA set.
"""
import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from jsnreg._accel import get_backend
from jsnreg.phantom import PhantomSpec, generate_pair
from jsnreg.transform import RigidParams, build_matrix, invert


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def kernel_table(size, repeat):
    pair = generate_pair(PhantomSpec(width=size, height=size, truth_lower=RigidParams(1.02, 0.05, 1.3, -0.7)))
    fixed, moving = pair.fixed.pixels.copy(), pair.moving.pixels.copy()
    region = pair.fixed_mask.lower.copy()
    params = np.array([1.02, 0.05, 1.3, -0.7])
    inv = np.ascontiguousarray(invert(build_matrix(RigidParams(*params)))[:2])

    rows = []
    outs = {}
    for name in ("numba", "numpy"):
        k = get_backend(name)
        out = np.empty_like(fixed)
        val, jac = np.empty_like(fixed), np.empty((4,) + fixed.shape)
        grad = np.zeros(4)
        calls = {
            "warp_affine": lambda: k.warp_affine(moving, inv, out),
            "warp_jacobian": lambda: k.warp_jacobian(moving, params, val, jac),
            "region_objective": lambda: k.region_objective(fixed, moving, region, params, grad),
        }
        t0 = time.perf_counter()
        for fn in calls.values():
            fn()
        first = time.perf_counter() - t0
        for label, fn in calls.items():
            rows.append((label, name, _time(fn, repeat)))
        ssq = k.region_objective(fixed, moving, region, params, grad)
        k.warp_jacobian(moving, params, val, jac)
        outs[name] = (k.warp_affine(moving, inv, out).copy(), val.copy(), jac.copy(), ssq, grad.copy())
        rows.append(("first call (all three)", name, first))

    a, b = outs["numba"], outs["numpy"]
    diffs = {
        "warp_affine": float(np.abs(a[0] - b[0]).max()),
        "warp_jacobian value": float(np.abs(a[1] - b[1]).max()),
        "warp_jacobian grads": float(np.abs(a[2] - b[2]).max()),
        "region_objective ssq (rel)": abs(a[3] - b[3]) / abs(b[3]),
        "region_objective grad (rel)": float(np.abs(a[4] - b[4]).max() / np.abs(b[4]).max()),
    }
    return rows, diffs


_PAIR_SCRIPT = """
import json, time
import numpy as np
from jsnreg._accel import BACKEND
from jsnreg.phantom import PhantomSpec, generate_pair, random_truth
from jsnreg.registration import register_pair
rng = np.random.default_rng(0)
pairs = [generate_pair(PhantomSpec(truth_upper=random_truth(rng), truth_lower=random_truth(rng),
                                   noise_sigma=0.02, rng_seed=k)) for k in range({n} + 1)]
p = pairs[0]
register_pair(p.fixed, p.moving, p.fixed_mask, p.moving_mask)  # warm-up / compile
t = time.perf_counter()
jsn = [register_pair(p.fixed, p.moving, p.fixed_mask, p.moving_mask).jsn_pixels for p in pairs[1:]]
print(json.dumps({{"backend": BACKEND, "s_per_pair": (time.perf_counter() - t) / {n}, "jsn": jsn}}))
"""


def pair_timing(n):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, JSNREG_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", _PAIR_SCRIPT.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        rec = json.loads(res.stdout.strip().splitlines()[-1])
        out[rec["backend"]] = rec
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--pairs", type=int, default=0, help="also time this many full registrations per backend")
    args = ap.parse_args()

    rows, diffs = kernel_table(args.size, args.repeat)
    print(f"kernels on {args.size}x{args.size} (best of {args.repeat})")
    print(f"{'kernel':28s} {'backend':8s} {'ms':>10s}")
    for label, name, t in rows:
        print(f"{label:28s} {name:8s} {t * 1e3:10.3f}")
    speed = {}
    for label, name, t in rows:
        speed.setdefault(label, {})[name] = t
    print()
    for label, d in speed.items():
        if label.startswith("first"):
            continue
        print(f"speed-up {label:22s} x{d['numpy'] / d['numba']:.1f}")
    print()
    print("max |numba - numpy|")
    for k, v in diffs.items():
        print(f"  {k:28s} {v:.3e}")

    if args.pairs > 0:
        res = pair_timing(args.pairs)
        print()
        for name, rec in res.items():
            print(f"register_pair [{name}] {rec['s_per_pair']:.2f} s/pair")
        d = np.abs(np.array(res["numba"]["jsn"]) - np.array(res["numpy"]["jsn"])).max()
        print(f"max JSN difference between backends: {d:.2e} px")


if __name__ == "__main__":
    main()
