"""Utility metrics comparing synthetic against real trajectories.

Point-level metrics work on a regular grid over the (normalized) bounding
box. Transport-based metrics use exact Wasserstein-1 with Euclidean
cell-center ground cost, solved as a linear program on the net mass
difference of the two distributions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.stats import kendalltau, wasserstein_distance

from . import kernels
from .core import Dataset

METRICS = (
    "density_error",
    "pattern_score",
    "avg_speed",
    "map_reconstruction",
    "g_rank",
    "transition_prob",
    "location_implausibility",
    "traffic_flow",
)

# which value each metric takes when synthetic == real
IDENTITY = {
    "density_error": 0.0,
    "pattern_score": 1.0,
    "avg_speed": 0.0,
    "map_reconstruction": 0.0,
    "g_rank": 1.0,
    "transition_prob": 0.0,
    "location_implausibility": 0.0,
    "traffic_flow": 0.0,
}


class MetricError(ValueError):
    pass


def _pts(x) -> np.ndarray:
    arr = x.points if isinstance(x, Dataset) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError(f"expected (N, L, 2) trajectories, got shape {arr.shape}")
    return arr


# --------------------------------------------------------------------------
# grid


@dataclass(frozen=True)
class Grid:
    """Regular ``cells_x`` by ``cells_y`` grid; flat index is ``iy * cells_x + ix``."""

    lower: tuple[float, float] = (-1.0, -1.0)
    upper: tuple[float, float] = (1.0, 1.0)
    cells_x: int = 64
    cells_y: int = 64

    def __post_init__(self):
        if self.cells_x < 1 or self.cells_y < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.upper[0] > self.lower[0] and self.upper[1] > self.lower[1]):
            raise ValueError("grid bounds must have positive extent")

    @property
    def n_cells(self) -> int:
        return self.cells_x * self.cells_y

    @property
    def cell_size(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.array([self.cells_x, self.cells_y])

    @property
    def cell_diagonal(self) -> float:
        return float(np.linalg.norm(self.cell_size))

    @property
    def diameter(self) -> float:
        """Largest distance between two cell centers."""
        return float(np.linalg.norm(self.cell_size * np.array([self.cells_x - 1, self.cells_y - 1])))

    def ij(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Column and row index per point; points outside clamp to border cells."""
        p = np.asarray(points, dtype=np.float64)
        rel = (p - np.asarray(self.lower)) / self.cell_size
        ix = np.clip(np.floor(rel[..., 0]).astype(np.int64), 0, self.cells_x - 1)
        iy = np.clip(np.floor(rel[..., 1]).astype(np.int64), 0, self.cells_y - 1)
        return ix, iy

    def index(self, points) -> np.ndarray:
        ix, iy = self.ij(points)
        return iy * self.cells_x + ix

    def centers(self, idx=None) -> np.ndarray:
        idx = np.arange(self.n_cells) if idx is None else np.asarray(idx, dtype=np.int64)
        ix, iy = idx % self.cells_x, idx // self.cells_x
        size = self.cell_size
        return np.stack([self.lower[0] + (ix + 0.5) * size[0], self.lower[1] + (iy + 0.5) * size[1]], axis=-1)

    def adjacent(self, a, b) -> np.ndarray:
        """True where flat cells ``a`` and ``b`` are equal or 8-adjacent."""
        a, b = np.asarray(a), np.asarray(b)
        return (np.abs(a % self.cells_x - b % self.cells_x) <= 1) & (np.abs(a // self.cells_x - b // self.cells_x) <= 1)

    def histogram(self, trajectories) -> np.ndarray:
        return np.bincount(self.index(_pts(trajectories)).ravel(), minlength=self.n_cells).astype(np.float64)


# --------------------------------------------------------------------------
# exact transport


def _transport_lp(cost: np.ndarray, supply: np.ndarray, demand: np.ndarray, pi: np.ndarray, pj: np.ndarray):
    """Transport LP restricted to edges ``(pi, pj)``; returns ``(cost, u, v)`` with duals.

    The last demand constraint is implied by the others (total supply equals
    total demand) and is dropped, which fixes its dual to 0. Keeping it lets
    HiGHS presolve flag the rounding residue in the totals as infeasible.
    """
    n, m = cost.shape
    k = pi.size
    keep = pj < m - 1
    rows = np.concatenate([pi, n + pj[keep]])
    cols = np.concatenate([np.arange(k), np.nonzero(keep)[0]])
    A = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n + m - 1, k))
    scale = supply.sum()
    b = np.concatenate([supply, demand[:-1]]) / scale
    res = linprog(cost[pi, pj], A_eq=A, b_eq=b, bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise MetricError(f"transport LP failed: {res.message}")
    duals = res.eqlin.marginals
    return float(res.fun) * scale, duals[:n], np.append(duals[n:], 0.0)


def _northwest_corner(supply: np.ndarray, demand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Edges of the northwest-corner plan, a feasible (not optimal) transport."""
    rs, rd = supply.copy(), demand.copy()
    i = j = 0
    ei, ej = [], []
    while i < rs.size and j < rd.size:
        ei.append(i)
        ej.append(j)
        f = min(rs[i], rd[j])
        rs[i] -= f
        rd[j] -= f
        if rs[i] <= rd[j]:
            i += 1
        else:
            j += 1
    # rounding can exhaust one side early; finish the staircase so every
    # row and column keeps at least one edge
    ei += [rs.size - 1] * (rd.size - j) + list(range(i, rs.size))
    ej += list(range(j, rd.size)) + [rd.size - 1] * (rs.size - i)
    return np.asarray(ei, dtype=np.int64), np.asarray(ej, dtype=np.int64)


def transport_cost(cost, supply, demand, dense_limit: int = 4096, k_nearest: int = 8) -> float:
    """Exact optimal transport cost for a balanced problem.

    Small problems go to one dense LP. Larger ones use column generation:
    start from each source's ``k_nearest`` cheapest edges plus a feasible
    northwest-corner plan, then add every edge with negative reduced cost
    (from the LP duals) until none is left, which certifies optimality.
    """
    cost = np.asarray(cost, dtype=np.float64)
    supply = np.asarray(supply, dtype=np.float64)
    demand = np.asarray(demand, dtype=np.float64)
    n, m = cost.shape
    if n * m <= dense_limit:
        pi, pj = np.repeat(np.arange(n), m), np.tile(np.arange(m), n)
        return _transport_lp(cost, supply, demand, pi, pj)[0]
    k = min(k_nearest, m)
    near = np.argpartition(cost, k - 1, axis=1)[:, :k]
    ei, ej = _northwest_corner(supply, demand)
    pi = np.concatenate([np.repeat(np.arange(n), k), ei])
    pj = np.concatenate([near.ravel(), ej])
    tol = 1e-12 * max(1.0, float(cost.max()))
    while True:
        key = np.unique(pi * m + pj)
        pi, pj = key // m, key % m
        total, u, v = _transport_lp(cost, supply, demand, pi, pj)
        bi, bj = np.nonzero(cost - u[:, None] - v[None, :] < -tol)
        if bi.size == 0:
            return total
        pi = np.concatenate([pi, bi])
        pj = np.concatenate([pj, bj])


def wasserstein_cells(a, b, centers) -> float:
    """Exact W1 between two mass vectors on points ``centers`` (Euclidean cost).

    Both vectors are normalized to unit mass. For a metric cost the optimal
    plan only needs to move the surplus ``(a - b)+`` onto the deficit
    ``(a - b)-``, so the transport problem lives on the net difference's
    support.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa, sb = a.sum(), b.sum()
    if sa <= 0 or sb <= 0:
        raise MetricError("transport between empty distributions")
    diff = a / sa - b / sb
    pos = np.nonzero(diff > 1e-15)[0]
    neg = np.nonzero(diff < -1e-15)[0]
    if pos.size == 0 or neg.size == 0:
        return 0.0
    supply, demand = diff[pos], -diff[neg]
    # balance the rounding residue
    demand *= supply.sum() / demand.sum()
    centers = np.asarray(centers, dtype=np.float64)
    cost = cdist(centers[pos], centers[neg])
    if pos.size == 1:
        return float(cost[0] @ demand)
    if neg.size == 1:
        return float(cost[:, 0] @ supply)
    return transport_cost(cost, supply, demand)


# --------------------------------------------------------------------------
# distributional metrics


def _check_range(name: str, v: float, lo: float, hi: float, tol: float = 1e-9) -> float:
    if not (lo - tol <= v <= hi + tol):
        raise MetricError(f"{name} = {v} outside [{lo}, {hi}]")
    return float(min(max(v, lo), hi))


def density_error(real, synthetic, grid: Grid = Grid()) -> float:
    """L1 distance between normalized per-cell point histograms, in ``[0, 2]``."""
    p, q = grid.histogram(real), grid.histogram(synthetic)
    if p.sum() == 0 or q.sum() == 0:
        raise MetricError("density error needs nonempty inputs")
    return _check_range("density_error", float(np.abs(p / p.sum() - q / q.sum()).sum()), 0.0, 2.0)


def top_cells(hist: np.ndarray, top_n: int) -> np.ndarray:
    """The ``top_n`` most visited cells (visited only); ties by ascending index."""
    visited = np.nonzero(hist > 0)[0]
    order = np.lexsort((visited, -hist[visited]))
    return visited[order[:top_n]]


def pattern_score(real, synthetic, grid: Grid = Grid(), top_n: int = 100) -> float:
    """F1 overlap of the ``top_n`` most visited cells, in ``[0, 1]``."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    a = set(top_cells(grid.histogram(real), top_n).tolist())
    b = set(top_cells(grid.histogram(synthetic), top_n).tolist())
    if not a and not b:
        raise MetricError("pattern score needs nonempty inputs")
    return _check_range("pattern_score", 2.0 * len(a & b) / (len(a) + len(b)), 0.0, 1.0)


def speeds(trajectories, step_seconds: float = 1.0, meters_per_unit: float | None = None) -> np.ndarray:
    """Mean consecutive-point displacement per unit time, one value per trajectory."""
    pts = _pts(trajectories)
    if pts.shape[1] < 2:
        raise ValueError("speeds need at least two points per trajectory")
    v = np.linalg.norm(np.diff(pts, axis=1), axis=2).mean(axis=1) / step_seconds
    return v * meters_per_unit if meters_per_unit else v


def avg_speed_distance(real, synthetic, step_seconds: float = 1.0, meters_per_unit: float | None = None) -> float:
    """Exact 1-D Wasserstein-1 between per-trajectory average speeds."""
    return float(wasserstein_distance(speeds(real, step_seconds, meters_per_unit),
                                      speeds(synthetic, step_seconds, meters_per_unit)))


def g_rank(real, synthetic, grid: Grid = Grid()) -> float | None:
    """Kendall's tau-b between visit counts over cells visited by either set.

    Returns ``None`` (metric skipped) when fewer than two cells are visited
    or the statistic is undefined.
    """
    p, q = grid.histogram(real), grid.histogram(synthetic)
    cells = np.nonzero((p > 0) | (q > 0))[0]
    if cells.size < 2:
        return None
    tau = kendalltau(p[cells], q[cells], variant="b").statistic
    if not np.isfinite(tau):
        return None
    return _check_range("g_rank", float(tau), -1.0, 1.0)


# --------------------------------------------------------------------------
# road network


class InfrastructureNetwork:
    """Segments between consecutive real points whose cells are equal or 8-adjacent.

    Transitions between non-adjacent cells are dropped as artifacts; the
    observed points themselves remain as zero-length segments (vertices).
    Exact duplicates are merged. Nearest-segment queries bucket segments
    by half-length so each bucket's KD-tree search radius stays tight.
    """

    def __init__(self, seg_a: np.ndarray, seg_b: np.ndarray, n_buckets: int = 8):
        self.seg_a = np.ascontiguousarray(seg_a, dtype=np.float64)
        self.seg_b = np.ascontiguousarray(seg_b, dtype=np.float64)
        if self.seg_a.shape[0] == 0:
            raise MetricError("empty infrastructure network")
        mid = 0.5 * (self.seg_a + self.seg_b)
        half = 0.5 * np.linalg.norm(self.seg_b - self.seg_a, axis=1)
        self._tree = cKDTree(mid)
        order = np.argsort(half, kind="stable")
        self._buckets = []
        for idx in np.array_split(order, min(n_buckets, order.size)):
            if idx.size:
                self._buckets.append((cKDTree(mid[idx]), idx, float(half[idx].max())))

    @classmethod
    def from_real(cls, real, grid: Grid = Grid()) -> "InfrastructureNetwork":
        pts = _pts(real)
        a = pts[:, :-1].reshape(-1, 2)
        b = pts[:, 1:].reshape(-1, 2)
        keep = grid.adjacent(grid.index(a), grid.index(b))
        nodes = pts.reshape(-1, 2)
        # every observed point stays on the network as a vertex, even when
        # all transitions through it were filtered out
        segs = np.concatenate([np.concatenate([a[keep], b[keep]], axis=1), np.concatenate([nodes, nodes], axis=1)])
        segs = np.unique(segs, axis=0)
        return cls(segs[:, :2], segs[:, 2:])

    def __len__(self) -> int:
        return self.seg_a.shape[0]

    def distances(self, points, chunk: int = 50_000) -> np.ndarray:
        """Euclidean distance from every point to its nearest segment."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        out = np.empty(p.shape[0])
        for s in range(0, p.shape[0], chunk):
            out[s : s + chunk] = self._distances(p[s : s + chunk])
        return out

    def _distances(self, p: np.ndarray) -> np.ndarray:
        # an upper bound from the segment with the nearest midpoint; any closer
        # segment has its midpoint within bound + half-length
        _, nearest = self._tree.query(p)
        first = np.arange(p.shape[0] + 1, dtype=np.int64)
        best = kernels.nearest_segment_distance(p, self.seg_a, self.seg_b, first, nearest)
        for tree, idx, hmax in self._buckets:
            todo = np.nonzero(best > 0)[0]
            k = min(16, idx.size)
            while todo.size:
                q = p[todo]
                radius = best[todo] + hmax + 1e-12
                dist, ind = tree.query(q, k=k, distance_upper_bound=float(radius.max()))
                dist, ind = dist.reshape(todo.size, -1), ind.reshape(todo.size, -1)
                valid = dist <= radius[:, None]
                indptr = np.concatenate([[0], np.cumsum(valid.sum(axis=1))])
                d = kernels.nearest_segment_distance(q, self.seg_a, self.seg_b, indptr, idx[ind[valid]])
                best[todo] = np.minimum(best[todo], d)
                # rows whose k-th neighbor is still in range may have more candidates
                todo = todo[valid[:, -1]] if k < idx.size else todo[:0]
                k = min(4 * k, idx.size)
        return best


def map_reconstruction(synthetic, network: InfrastructureNetwork) -> float:
    """Mean distance from synthetic points to the nearest network segment."""
    return float(network.distances(_pts(synthetic)).mean())


def location_implausibility(synthetic, network: InfrastructureNetwork, threshold: float) -> float:
    """Share of synthetic points farther than ``threshold`` from the network."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    frac = float(np.mean(network.distances(_pts(synthetic)) > threshold))
    return _check_range("location_implausibility", frac, 0.0, 1.0)


# --------------------------------------------------------------------------
# transition dynamics


def transition_counts(trajectories, grid: Grid, step: int | None = None) -> sp.csr_matrix:
    """Sparse ``(cells, cells)`` counts of consecutive-point transitions.

    With ``step`` only the transition from time index ``step`` to
    ``step + 1`` is counted.
    """
    cells = grid.index(_pts(trajectories))
    if step is None:
        src, dst = cells[:, :-1].ravel(), cells[:, 1:].ravel()
    else:
        src, dst = cells[:, step], cells[:, step + 1]
    n = grid.n_cells
    return sp.csr_matrix((np.ones(src.size), (src, dst)), shape=(n, n))


def _row(m: sp.csr_matrix, i: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = m.indptr[i], m.indptr[i + 1]
    return m.indices[lo:hi], m.data[lo:hi]


def _row_w1(ci, wi, cj, wj, grid: Grid) -> float:
    support = np.union1d(ci, cj)
    a = np.zeros(support.size)
    b = np.zeros(support.size)
    a[np.searchsorted(support, ci)] = wi
    b[np.searchsorted(support, cj)] = wj
    return wasserstein_cells(a, b, grid.centers(support))


def transition_prob_distance(real, synthetic, grid: Grid = Grid()) -> float:
    """Frequency-weighted W1 between real and synthetic transition rows.

    Each source cell with real transitions contributes the exact W1 between
    its real and synthetic destination distributions, weighted by its share
    of real transitions. A source the synthetic data never leaves from
    contributes the grid diameter.
    """
    R = transition_counts(real, grid)
    S = transition_counts(synthetic, grid)
    mass = np.asarray(R.sum(axis=1)).ravel()
    total = mass.sum()
    if total == 0:
        raise MetricError("no transitions in real data")
    out = 0.0
    for i in np.nonzero(mass)[0]:
        cj, wj = _row(S, i)
        if cj.size == 0:
            w = grid.diameter
        else:
            ci, wi = _row(R, i)
            w = _row_w1(ci, wi, cj, wj, grid)
        out += mass[i] / total * w
    return float(out)


def _stochastic(counts: sp.csr_matrix) -> sp.csr_matrix:
    rows = np.asarray(counts.sum(axis=1)).ravel()
    inv = np.divide(1.0, rows, out=np.zeros_like(rows), where=rows > 0)
    return sp.diags(inv) @ counts


def traffic_flow_distance(real, synthetic, grid: Grid = Grid(), horizon: int | None = None) -> float:
    """Time-averaged W1 between propagated and observed real cell distributions.

    Starting from the real distribution at time 0, the distribution is
    pushed forward with the synthetic per-step transition matrices and
    compared with the real distribution at every step up to ``horizon``
    (default ``L - 1``). Mass sitting in a cell the synthetic data never
    leaves from at that step uses the synthetic transitions pooled over all
    steps, or stays put if those are missing too.
    """
    rp, sp_ = _pts(real), _pts(synthetic)
    length = min(rp.shape[1], sp_.shape[1])
    horizon = length - 1 if horizon is None else int(horizon)
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if horizon > length - 1:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {length}")
    rcells = grid.index(rp)
    n = grid.n_cells
    pooled = _stochastic(transition_counts(sp_, grid))
    pooled_has = np.asarray(pooled.sum(axis=1)).ravel() > 0
    p = np.bincount(rcells[:, 0], minlength=n).astype(np.float64)
    p /= p.sum()
    total = 0.0
    for step in range(horizon):
        P = _stochastic(transition_counts(sp_, grid, step))
        has = np.asarray(P.sum(axis=1)).ravel() > 0
        nxt = P.T @ p
        miss = (~has) & (p > 0)
        if miss.any():
            use_pool = miss & pooled_has
            if use_pool.any():
                nxt += pooled.T @ np.where(use_pool, p, 0.0)
            nxt += np.where(miss & ~pooled_has, p, 0.0)
        p = nxt
        target = np.bincount(rcells[:, step + 1], minlength=n).astype(np.float64)
        support = np.nonzero((p > 0) | (target > 0))[0]
        total += wasserstein_cells(p[support], target[support], grid.centers(support))
    return total / horizon


# --------------------------------------------------------------------------
# evaluation and protocol


@dataclass(frozen=True)
class MetricSettings:
    grid: Grid = Grid()
    top_n: int = 100
    threshold: float | None = None
    horizon: int | None = None
    step_seconds: float = 1.0
    meters_per_unit: float | None = None


def evaluate(real, synthetic, settings: MetricSettings = MetricSettings(),
             network: InfrastructureNetwork | None = None) -> dict[str, float | None]:
    """All eight metrics; ``None`` marks a metric that is undefined for these inputs."""
    g = settings.grid
    network = network or InfrastructureNetwork.from_real(real, g)
    thr = settings.threshold or g.cell_diagonal
    dist = network.distances(_pts(synthetic))
    return {
        "density_error": density_error(real, synthetic, g),
        "pattern_score": pattern_score(real, synthetic, g, settings.top_n),
        "avg_speed": avg_speed_distance(real, synthetic, settings.step_seconds, settings.meters_per_unit),
        "map_reconstruction": float(dist.mean()),
        "g_rank": g_rank(real, synthetic, g),
        "transition_prob": transition_prob_distance(real, synthetic, g),
        "location_implausibility": _check_range("location_implausibility", float(np.mean(dist > thr)), 0.0, 1.0),
        "traffic_flow": traffic_flow_distance(real, synthetic, g, settings.horizon),
    }


@dataclass
class MetricReport:
    """Per-metric values over independent runs."""

    values: dict[str, list]
    n_samples: int
    label: str = ""
    skipped: dict[str, str] = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return max((len(v) for v in self.values.values()), default=0)

    def mean(self, name: str) -> float | None:
        v = [x for x in self.values.get(name, []) if x is not None]
        return float(np.mean(v)) if v else None

    def std(self, name: str) -> float | None:
        v = [x for x in self.values.get(name, []) if x is not None]
        return float(np.std(v)) if v else None

    def to_dict(self) -> dict:
        rows = {}
        for name in METRICS:
            rows[name] = {"mean": self.mean(name), "std": self.std(name), "runs": self.values.get(name, [])}
            if name in self.skipped:
                rows[name]["skipped"] = self.skipped[name]
        return {"label": self.label, "n_runs": self.n_runs, "n_samples": self.n_samples, "metrics": rows}

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        values = {k: list(v["runs"]) for k, v in d["metrics"].items()}
        skipped = {k: v["skipped"] for k, v in d["metrics"].items() if "skipped" in v}
        return cls(values, int(d["n_samples"]), d.get("label", ""), skipped)


def format_table(reports: list[MetricReport]) -> str:
    """Metric-by-method table, ``mean ± std`` per entry."""
    labels = [r.label or f"run{k}" for k, r in enumerate(reports)]
    width = max([len(n) for n in METRICS] + [6])
    cols = [max(len(lbl), 19) for lbl in labels]
    lines = ["metric".ljust(width) + "  " + "  ".join(lbl.rjust(c) for lbl, c in zip(labels, cols))]
    for name in METRICS:
        cells = []
        for r, c in zip(reports, cols):
            m, s = r.mean(name), r.std(name)
            cells.append(("skipped" if m is None else f"{m:.4f} ± {s:.4f}").rjust(c))
        lines.append(name.ljust(width) + "  " + "  ".join(cells))
    return "\n".join(lines)


def run_protocol(generate: Callable[[int, int], np.ndarray], real, n_runs: int = 4, n_samples: int = 10_000,
                 seed: int = 0, settings: MetricSettings = MetricSettings(), label: str = "") -> MetricReport:
    """Score ``n_runs`` independent generations against ``real``.

    ``generate(n, seed)`` returns ``n`` synthetic trajectories; run ``k``
    uses the ``k``-th seed spawned from ``seed``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    network = InfrastructureNetwork.from_real(real, settings.grid)
    seeds = np.random.SeedSequence(seed).generate_state(n_runs, dtype=np.uint32)
    values: dict[str, list] = {name: [] for name in METRICS}
    skipped: dict[str, str] = {}
    for k in range(n_runs):
        syn = generate(n_samples, int(seeds[k]))
        for name, v in evaluate(real, syn, settings, network).items():
            values[name].append(v)
            if v is None:
                skipped[name] = "undefined for these inputs"
    return MetricReport(values, n_samples, label, skipped)


def draw_cells(index, n: int, rng: np.random.Generator, by_members: bool = True) -> tuple[list, np.ndarray]:
    """Pick ``n`` occupied cells: in proportion to member count (a random training record's
    condition) or uniformly. Returns the occupied cells and the sorted picks into them."""
    occupied = [c for c in index.cells if c.member_ids]
    if by_members:
        sizes = np.array([len(c.member_ids) for c in occupied], dtype=np.float64)
        pick = rng.choice(len(occupied), size=n, p=sizes / sizes.sum())
    else:
        pick = rng.integers(0, len(occupied), size=n)
    return occupied, np.sort(pick)


def conditional_generator(model, index, guidance=None, sampler: str = "ddpm",
                          by_members: bool = True) -> Callable[[int, int], np.ndarray]:
    """Draw conditions as in :func:`draw_cells`, then sample one trajectory per draw."""
    from .diffusion import GuidanceConfig, sample
    from .segmentation import condition_vector

    guidance = guidance or GuidanceConfig()
    table = np.stack([condition_vector(c) for c in index.cells if c.member_ids])

    def gen(n: int, seed: int) -> np.ndarray:
        _, pick = draw_cells(index, n, np.random.default_rng(seed), by_members)
        return sample(model, table[pick], guidance, sampler, seed=seed, n=n)

    return gen


def bootstrap_generator(real) -> Callable[[int, int], np.ndarray]:
    """Resample real trajectories with replacement (real-vs-real calibration)."""
    pts = _pts(real)

    def gen(n: int, seed: int) -> np.ndarray:
        return pts[np.random.default_rng(seed).integers(0, pts.shape[0], size=n)]

    return gen
