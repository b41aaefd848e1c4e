"""Time the numba and numpy variants of each kernel on representative inputs.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are called directly, so the result does not depend on
XAIEWS_NUMBA.  The first numba call (compilation or cache load) is excluded.
"""
import argparse
import timeit

import numpy as np

from xaiews import _accel


def cases(rng):
    # relevance through a conv; the loop path is dispatched only for small work
    a1 = rng.random((1, 24, 4))
    w1 = rng.normal(size=(3, 4, 4))
    r1 = rng.random((1, 24, 4))
    yield "zplus_conv 4x4, B=1", (lambda: _accel.zplus_conv_loops(a1, w1, 2, r1, 1e-12),
                                   lambda: _accel.zplus_conv_numpy(a1, w1, 2, r1, 1e-12))
    a = rng.random((100, 24, 8))
    w = rng.normal(size=(3, 8, 8))
    r = rng.random((100, 24, 8))
    yield "zplus_conv 8x8, B=100", (lambda: _accel.zplus_conv_loops(a, w, 2, r, 1e-12),
                                     lambda: _accel.zplus_conv_numpy(a, w, 2, r, 1e-12))
    a64 = rng.random((20, 24, 64))
    w64 = rng.normal(size=(3, 64, 64))
    r64 = rng.random((20, 24, 64))
    yield "zplus_conv 64x64, B=20", (lambda: _accel.zplus_conv_loops(a64, w64, 2, r64, 1e-12),
                                      lambda: _accel.zplus_conv_numpy(a64, w64, 2, r64, 1e-12))
    pos = np.round(rng.normal(1.0, 1.0, 200), 1)
    neg = np.round(rng.normal(0.0, 1.0, 9800), 1)
    yield "pair_auroc 200 x 9800", (lambda: _accel.pair_auroc_loops(pos, neg),
                                    lambda: _accel.pair_auroc_numpy(pos, neg))
    X = rng.normal(size=(3000, 30))
    t = rng.normal(size=3000)
    order = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
    mask = np.ones(3000, dtype=bool)
    yield "best_split 3000 x 30", (lambda: _accel.best_split_loops(X, t, order, mask),
                                   lambda: _accel.best_split_numpy(X, t, order, mask))
    bins = rng.integers(0, 24, 400)
    codes = rng.integers(0, 34, 400)
    vals = rng.normal(size=400)
    yield "bucket 400 events", (lambda: _accel.bucket_loops(bins, codes, vals, 24, 34),
                                lambda: _accel.bucket_numpy(bins, codes, vals, 24, 34))


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        print("numba not installed: the loop variants run as plain Python")
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, ref) in cases(np.random.default_rng(args.seed)):
        fast()
        t_fast = best_of(fast, args.repeat)
        t_ref = best_of(ref, args.repeat)
        print(f"{name:28s} {1e3 * t_fast:10.3f} {1e3 * t_ref:10.3f} {t_ref / t_fast:8.2f}")


if __name__ == "__main__":
    main()
