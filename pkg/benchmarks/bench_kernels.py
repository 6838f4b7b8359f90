#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallbacks.

Runs each hot kernel on representative sizes with both backends and prints
a table of medians plus the speedup. The compiled extension must be built
(`python setup.py build_ext --inplace` or a normal install); results also
double-check that both backends agree bit-for-bit on the benchmarked calls.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import statistics
import time

import numpy as np

from mltr.kernels import slow

try:
    from mltr.kernels import _fast as fast
except ImportError:
    fast = None


def timed(func, *args, repeats=5):
    best = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = func(*args)
        best.append(time.perf_counter() - t0)
    return statistics.median(best), out


def bench_case(name, fn_name, args, repeats, check=None):
    slow_fn = getattr(slow, fn_name)
    t_slow, out_slow = timed(slow_fn, *args, repeats=repeats)
    if fast is None:
        print(f"{name:<38} python {t_slow * 1e3:8.2f} ms   (no extension)")
        return
    fast_fn = getattr(fast, fn_name)
    t_fast, out_fast = timed(fast_fn, *args, repeats=repeats)
    if check is not None:
        check(out_slow, out_fast)
    ratio = t_slow / t_fast if t_fast > 0 else float("inf")
    print(f"{name:<38} python {t_slow * 1e3:8.2f} ms   "
          f"compiled {t_fast * 1e3:8.2f} ms   speedup {ratio:6.1f}x")


def equal(a, b):
    assert np.array_equal(a, b), "backends disagree"


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    r = args.repeats

    print(f"kernel backends: python vs "
          f"{'compiled' if fast is not None else 'MISSING (build the extension)'}\n")

    x = rng.standard_normal((3, 512, 512)).astype(np.float32)
    bench_case("im2col 3x512x512 k3 s1", "im2col", (x, 3, 1), r, equal)
    x2 = rng.standard_normal((64, 66, 66)).astype(np.float32)
    bench_case("im2col 64x66x66 k3 s2", "im2col", (x2, 3, 2), r, equal)

    cols = rng.standard_normal((27, 510 * 510)).astype(np.float32)
    bench_case("col2im 3x512x512 k3 s1", "col2im", (cols, 3, 512, 512, 3, 1), r, equal)

    idx = rng.integers(0, 1024, size=65536)
    rows = rng.standard_normal((65536, 64)).astype(np.float32)

    def scatter_python(i, v):
        out = np.zeros((1024, 64), np.float32)
        slow.scatter_add_rows(out, i, v)
        return out

    def scatter_compiled(i, v):
        out = np.zeros((1024, 64), np.float32)
        fast.scatter_add_rows(out, i, v)
        return out

    t_slow, out_slow = timed(scatter_python, idx, rows, repeats=r)
    if fast is not None:
        t_fast, out_fast = timed(scatter_compiled, idx, rows, repeats=r)
        equal(out_slow, out_fast)
        print(f"{'scatter_add 65536 rows into 1024x64':<38} "
              f"python {t_slow * 1e3:8.2f} ms   compiled {t_fast * 1e3:8.2f} ms   "
              f"speedup {t_slow / t_fast:6.1f}x")

    img = rng.integers(0, 256, (512, 512)).astype(np.uint8)
    luts = rng.integers(0, 256, (8, 8, 256)).astype(np.float64)
    bench_case("clahe_apply 512x512, 8x8 tiles", "clahe_apply",
               (img, luts, 64, 64), r, equal)


if __name__ == "__main__":
    main()
