"""Time every hot kernel under the numba and the pure-numpy backend.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel is run once per backend to warm up (numba compiles on first
call), then timed ``--repeat`` times; the minimum is reported.  Outputs of
the two backends are compared as they are timed.
"""
import argparse
import json
import time

import numpy as np

from dmn import _accel
from dmn.linalg import matmul, symmetric_eig
from dmn.patching import col2im, im2col, maxpool2, maxpool2_backward


def _cases(rng):
    sym = {}
    for d in (9, 54, 81):
        a = rng.normal(size=(d, d))
        sym[d] = a @ a.T
    images = rng.random((256, 1, 28, 28))
    maps = rng.random((128, 32, 13, 13))
    feat = rng.random((128, 32, 26, 26))
    pooled, arg = maxpool2(feat)
    cols = im2col(maps, 3)
    a, b = rng.normal(size=(120, 90)), rng.normal(size=(90, 110))
    cases = [(f"jacobi d={d}", lambda m=m: symmetric_eig(m).eigenvalues) for d, m in sym.items()]
    cases += [
        ("matmul 120x90x110", lambda: matmul(a, b)),
        ("im2col 256x1x28x28 k3", lambda: im2col(images, 3)),
        ("im2col 128x32x13x13 k3", lambda: im2col(maps, 3)),
        ("col2im 128x32x13x13 k3", lambda: col2im(cols, maps.shape, 3)),
        ("maxpool2 128x32x26x26", lambda: maxpool2(feat)[0]),
        ("maxpool2 backward", lambda: maxpool2_backward(pooled, arg, feat.shape)),
    ]
    return cases


def _time(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def run(repeat=5, seed=0):
    rows = []
    for name, fn in _cases(np.random.default_rng(seed)):
        times, outs = {}, {}
        for flag in (True, False):
            with _accel.use_numba(flag):
                fn()
                times[flag], outs[flag] = _time(fn, repeat)
        err = float(np.max(np.abs(outs[True] - outs[False])))
        rows.append({"kernel": name, "numba_s": times[True], "numpy_s": times[False],
                     "speedup": times[False] / times[True], "max_abs_diff": err})
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", default=None)
    args = p.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy backend is available")
        return
    rows = run(args.repeat)
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in rows:
        print(f"{r['kernel']:28s} {1e3 * r['numba_s']:10.3f} {1e3 * r['numpy_s']:10.3f} "
              f"{r['speedup']:8.1f} {r['max_abs_diff']:10.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
