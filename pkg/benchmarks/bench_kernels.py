#!/usr/bin/env python3
"""Time the numba-compiled kernels against the pure-Python fallback.

The JIT is warmed up once before timing so compilation cost is excluded.
Run with GEOTRACK_DISABLE_NUMBA=1 to confirm the package still works (this
script then reports the fallback twice).
"""

import time

import numpy as np

from geotrack import _kernels


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        started = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - started)
    return best


def bench_assignment(rng, size, repeats=30):
    m = size
    n = size * 2
    cost = rng.normal(size=(m, n))
    rows = []
    for label, impl in (("numba", _kernels.lap_core_jit),
                        ("python", _kernels.lap_core_py)):
        if impl is None:
            rows.append((label, float("nan")))
            continue
        rows.append((label, timeit(
            lambda: _kernels.solve_lap_min(cost, impl=impl), repeats)))
    return rows


def bench_iou(rng, size, repeats=30):
    boxes_a = rng.uniform(0, 1000, size=(size, 4))
    boxes_b = rng.uniform(0, 1000, size=(size, 4))
    boxes_a[:, 2:] += 5
    boxes_b[:, 2:] += 5
    rows = []
    for label, impl in (("numba", _kernels.iou_matrix_core_jit),
                        ("python", _kernels.iou_matrix_core_py)):
        if impl is None:
            rows.append((label, float("nan")))
            continue
        rows.append((label, timeit(
            lambda: _kernels.iou_matrix(boxes_a, boxes_b, impl=impl), repeats)))
    return rows


def main():
    print(f"numba enabled: {_kernels.NUMBA_ENABLED}")
    _kernels.warmup()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<24}{'size':>6}{'numba (ms)':>14}{'python (ms)':>14}"
          f"{'speedup':>10}")
    for size in (10, 30, 90):
        rows = dict(bench_assignment(rng, size))
        speedup = rows["python"] / rows["numba"] if rows["numba"] else float("nan")
        print(f"{'assignment (m x 2m)':<24}{size:>6}"
              f"{rows['numba'] * 1e3:>14.3f}{rows['python'] * 1e3:>14.3f}"
              f"{speedup:>9.1f}x")
    for size in (50, 200, 800):
        rows = dict(bench_iou(rng, size))
        speedup = rows["python"] / rows["numba"] if rows["numba"] else float("nan")
        print(f"{'iou matrix (n x n)':<24}{size:>6}"
              f"{rows['numba'] * 1e3:>14.3f}{rows['python'] * 1e3:>14.3f}"
              f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
