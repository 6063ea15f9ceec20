"""Independent reference implementations used as test oracles."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.optimize import linear_sum_assignment


def frechet_brute_force(a, b) -> float:
    """Discrete Fréchet distance by enumerating every monotone coupling.

    A coupling is a lattice path from ``(0, 0)`` to ``(n-1, m-1)`` with steps
    ``(1,0)``, ``(0,1)`` or ``(1,1)``; its cost is the largest pairwise
    distance along the path. The distance is the minimum cost over paths.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n, m = len(a), len(b)
    diff = a[:, None, :] - b[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    best = np.inf

    def walk(i, j, cost):
        nonlocal best
        cost = max(cost, d[i, j])
        if cost >= best:
            return
        if i == n - 1 and j == m - 1:
            best = cost
            return
        if i + 1 < n:
            walk(i + 1, j, cost)
        if j + 1 < m:
            walk(i, j + 1, cost)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost)

    walk(0, 0, 0.0)
    return float(best)


def coupling_count(n: int, m: int) -> int:
    """Number of monotone couplings (Delannoy number) as a sanity check on the enumerator."""

    @lru_cache(maxsize=None)
    def dn(i, j):
        if i == 0 or j == 0:
            return 1
        return dn(i - 1, j) + dn(i, j - 1) + dn(i - 1, j - 1)

    return dn(n - 1, m - 1)


def spectral_norm_svd(a) -> float:
    return float(np.linalg.svd(np.asarray(a, dtype=np.float64), compute_uv=False)[0])


def w1_hungarian(xa, xb, cost_fn=None) -> float:
    """Exact W1 between two uniform empirical measures of equal size via assignment.

    For equal-size uniform measures an optimal plan exists at a permutation
    matrix (Birkhoff), so the Hungarian algorithm gives the exact value.
    """
    xa = np.asarray(xa, dtype=np.float64)
    xb = np.asarray(xb, dtype=np.float64)
    if xa.ndim == 1:
        xa, xb = xa[:, None], xb[:, None]
    if len(xa) != len(xb):
        raise ValueError("equal-size samples required")
    c = np.sqrt(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1)) if cost_fn is None else cost_fn(xa, xb)
    r, s = linear_sum_assignment(c)
    return float(c[r, s].mean())


def w1_counts_hungarian(counts_a, counts_b, centers) -> float:
    """W1 between two integer histograms of equal total mass, expanded to unit atoms."""
    counts_a = np.asarray(counts_a, dtype=np.int64)
    counts_b = np.asarray(counts_b, dtype=np.int64)
    xa = np.repeat(np.asarray(centers, dtype=np.float64), counts_a, axis=0)
    xb = np.repeat(np.asarray(centers, dtype=np.float64), counts_b, axis=0)
    return w1_hungarian(xa, xb)


def all_couplings(n: int, m: int):
    """Yield every monotone coupling path explicitly (small sizes only)."""
    def rec(i, j, path):
        path = path + [(i, j)]
        if i == n - 1 and j == m - 1:
            yield path
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                yield from rec(i + di, j + dj, path)

    yield from rec(0, 0, [])


def frechet_by_paths(a, b) -> float:
    """Slowest oracle: minimum over explicitly materialized coupling paths."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return min(max(float(np.hypot(a[i, 0] - b[j, 0], a[i, 1] - b[j, 1])) for i, j in p) for p in all_couplings(len(a), len(b)))


__all__ = [
    "all_couplings",
    "coupling_count",
    "frechet_brute_force",
    "frechet_by_paths",
    "spectral_norm_svd",
    "w1_counts_hungarian",
    "w1_hungarian",
]
