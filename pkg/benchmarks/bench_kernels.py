"""Benchmark the numba kernels against their numpy fallbacks.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on the
same inputs under both backends; the first numba call (compilation) is
excluded and results are checked for agreement before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np
from scipy.spatial import cKDTree

from trajsynth import _accel
from trajsynth.kernels import frechet_matrix, frechet_one_to_many, nearest_segment_distance


def best_of(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def frechet_case(rng, n: int, length: int):
    a = np.cumsum(rng.normal(size=(length, 2)), axis=0)
    bs = np.cumsum(rng.normal(size=(n, length, 2)), axis=1)
    return "frechet_one_to_many", lambda: frechet_one_to_many(a, bs)


def matrix_case(rng, n: int, length: int):
    xs = np.cumsum(rng.normal(size=(n, length, 2)), axis=1)
    ys = np.cumsum(rng.normal(size=(n, length, 2)), axis=1)
    return "frechet_matrix", lambda: frechet_matrix(xs, ys)


def segment_case(rng, n_points: int, n_segments: int, k: int = 16):
    seg_a = rng.uniform(-1, 1, (n_segments, 2))
    seg_b = seg_a + rng.normal(scale=0.05, size=(n_segments, 2))
    pts = rng.uniform(-1, 1, (n_points, 2))
    _, cand = cKDTree(0.5 * (seg_a + seg_b)).query(pts, k=k)
    indptr = np.arange(0, n_points * k + 1, k)
    cand = cand.ravel()
    return "nearest_segment_distance", lambda: nearest_segment_distance(pts, seg_a, seg_b, indptr, cand)


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not _accel.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    cases = [
        frechet_case(rng, 2000, 64),
        frechet_case(rng, 200, 256),
        matrix_case(rng, 40, 64),
        segment_case(rng, 200_000, 20_000),
    ]
    print(f"{'kernel':<26}{'numpy [s]':>12}{'numba [s]':>12}{'speedup':>10}")
    for name, fn in cases:
        with _accel.backend("numba"):
            ref = fn()  # compile
            t_nb = best_of(fn, args.repeats)
        with _accel.backend("numpy"):
            out = fn()
            t_np = best_of(fn, args.repeats)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
        print(f"{name:<26}{t_np:>12.4f}{t_nb:>12.4f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
