"""Hot numeric kernels with numba and pure-numpy implementations.

Every public function dispatches on :func:`trajsynth._accel.use_numba`. The
two paths compute the same quantities with the same floating point operations
per cell, so results agree to the last bit for the Fréchet kernels and to
rounding for the segment distances.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import njit, use_numba

__all__ = [
    "frechet",
    "frechet_one_to_many",
    "frechet_matrix",
    "nearest_segment_distance",
]


# --------------------------------------------------------------------------
# discrete Fréchet distance


@njit
def _frechet_nb(a, b):
    n = a.shape[0]
    m = b.shape[0]
    prev = np.empty(m)
    cur = np.empty(m)
    for i in range(n):
        for j in range(m):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            d = math.hypot(dx, dy)
            if i == 0 and j == 0:
                best = d
            elif i == 0:
                best = cur[j - 1]
            elif j == 0:
                best = prev[0]
            else:
                best = min(prev[j], prev[j - 1], cur[j - 1])
            cur[j] = max(best, d)
        prev, cur = cur, prev
    return prev[m - 1]


@njit
def _frechet_one_to_many_nb(a, bs):
    out = np.empty(bs.shape[0])
    for k in range(bs.shape[0]):
        out[k] = _frechet_nb(a, bs[k])
    return out


@njit
def _frechet_matrix_nb(xs, ys):
    out = np.empty((xs.shape[0], ys.shape[0]))
    for i in range(xs.shape[0]):
        for k in range(ys.shape[0]):
            out[i, k] = _frechet_nb(xs[i], ys[k])
    return out


def _frechet_one_to_many_np(a, bs):
    # Anti-diagonal wavefront, vectorized over the batch and the diagonal.
    n = a.shape[0]
    nb, m, _ = bs.shape
    diff = a[None, :, None, :] - bs[:, None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    acc = np.empty((nb, n, m))
    for s in range(n + m - 1):
        i = np.arange(max(0, s - m + 1), min(n, s + 1))
        j = s - i
        if s == 0:
            acc[:, 0, 0] = dist[:, 0, 0]
            continue
        best = np.full((nb, i.size), np.inf)
        up = i > 0
        left = j > 0
        diag = up & left
        best[:, up] = acc[:, i[up] - 1, j[up]]
        best[:, left] = np.minimum(best[:, left], acc[:, i[left], j[left] - 1])
        best[:, diag] = np.minimum(best[:, diag], acc[:, i[diag] - 1, j[diag] - 1])
        acc[:, i, j] = np.maximum(best, dist[:, i, j])
    return acc[:, n - 1, m - 1].copy()


def _as_points(x, name):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"{name} must have shape (n, 2), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return arr


def _as_batch(x, name):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"{name} must have shape (k, n, 2), got {arr.shape}")
    if arr.shape[1] == 0:
        raise ValueError(f"{name} holds empty trajectories")
    return arr


def frechet(a, b) -> float:
    """Discrete Fréchet distance between two planar polylines.

    Parameters
    ----------
    a, b : array_like, shape (n, 2) and (m, 2)

    Returns
    -------
    float
        Minimum over monotone couplings of the maximum Euclidean gap.
    """
    a = _as_points(a, "a")
    b = _as_points(b, "b")
    if use_numba():
        return float(_frechet_nb(a, b))
    return float(_frechet_one_to_many_np(a, b[None])[0])


def frechet_one_to_many(a, bs) -> np.ndarray:
    """Fréchet distances from ``a`` to every trajectory in ``bs``."""
    a = _as_points(a, "a")
    bs = _as_batch(bs, "bs")
    if bs.shape[0] == 0:
        return np.empty(0)
    if use_numba():
        return _frechet_one_to_many_nb(a, bs)
    return _frechet_one_to_many_np(a, bs)


def frechet_matrix(xs, ys) -> np.ndarray:
    """Pairwise Fréchet distances, shape ``(len(xs), len(ys))``."""
    xs = _as_batch(xs, "xs")
    ys = _as_batch(ys, "ys")
    if xs.shape[0] == 0 or ys.shape[0] == 0:
        return np.empty((xs.shape[0], ys.shape[0]))
    if use_numba():
        return _frechet_matrix_nb(xs, ys)
    return np.stack([_frechet_one_to_many_np(x, ys) for x in xs])


# --------------------------------------------------------------------------
# point to segment-set distance


@njit
def _segment_min_nb(points, seg_a, seg_b, indptr, cand):
    out = np.empty(points.shape[0])
    for p in range(points.shape[0]):
        px = points[p, 0]
        py = points[p, 1]
        best = np.inf
        for q in range(indptr[p], indptr[p + 1]):
            s = cand[q]
            ax = seg_a[s, 0]
            ay = seg_a[s, 1]
            ux = seg_b[s, 0] - ax
            uy = seg_b[s, 1] - ay
            den = ux * ux + uy * uy
            t = 0.0
            if den > 0.0:
                t = ((px - ax) * ux + (py - ay) * uy) / den
                t = min(1.0, max(0.0, t))
            if t >= 1.0:
                dx = px - seg_b[s, 0]
                dy = py - seg_b[s, 1]
            else:
                dx = px - (ax + t * ux)
                dy = py - (ay + t * uy)
            d = np.sqrt(dx * dx + dy * dy)
            if d < best:
                best = d
        out[p] = best
    return out


def _segment_min_np(points, seg_a, seg_b, indptr, cand):
    counts = np.diff(indptr)
    owner = np.repeat(np.arange(points.shape[0]), counts)
    p = points[owner]
    a = seg_a[cand]
    u = seg_b[cand] - a
    den = np.einsum("ij,ij->i", u, u)
    num = np.einsum("ij,ij->i", p - a, u)
    t = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    t = np.clip(t, 0.0, 1.0)
    # snap t == 1 to the endpoint itself so points on an endpoint get exactly 0
    foot = np.where(t[:, None] >= 1.0, seg_b[cand], a + t[:, None] * u)
    d = np.sqrt(np.sum((p - foot) ** 2, axis=1))
    out = np.full(points.shape[0], np.inf)
    np.minimum.at(out, owner, d)
    return out


def nearest_segment_distance(points, seg_a, seg_b, indptr, candidates) -> np.ndarray:
    """Minimum distance from each point to its candidate segments.

    ``candidates[indptr[p]:indptr[p + 1]]`` lists segment indices to test for
    point ``p`` (CSR layout). Points with no candidates get ``inf``.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    seg_a = np.ascontiguousarray(seg_a, dtype=np.float64)
    seg_b = np.ascontiguousarray(seg_b, dtype=np.float64)
    indptr = np.ascontiguousarray(indptr, dtype=np.int64)
    candidates = np.ascontiguousarray(candidates, dtype=np.int64)
    if use_numba():
        return _segment_min_nb(points, seg_a, seg_b, indptr, candidates)
    return _segment_min_np(points, seg_a, seg_b, indptr, candidates)
