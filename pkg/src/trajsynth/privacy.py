"""Memorization audit and ball-constrained Laplace mitigation.

A synthetic trajectory counts as memorized when its nearest real neighbor
(discrete Fréchet, normalized coordinates) is much closer than the second
nearest: ``d1 / d2 < k``. Conditions whose samples are memorized more often
than the upsampling threshold allows get flagged; their generated sets can be
pulled into a ball of radius ``delta`` around the set's pointwise barycenter.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from . import kernels
from .core import Dataset, Source, Trajectory
from .diffusion.model import generated_count

Generator = Callable[[int, int], np.ndarray]
"""``(count, seed) -> (count, L, 2)`` array of normalized synthetic trajectories."""


class Flag(str, Enum):
    CLEAR = "clear"
    POTENTIALLY_AT_RISK = "potentially_at_risk"
    CERTAIN_RISK = "certain_risk"


class SingletonCellError(ValueError):
    """A memorization ratio needs at least two real neighbors."""


@dataclass(frozen=True)
class MemorizationTest:
    ratio_threshold: float = 0.5
    upsampling_factors: tuple[float, ...] = (0.5, 1, 2, 4, 8, 16)
    repeats: int = 10

    def __post_init__(self):
        object.__setattr__(self, "upsampling_factors", tuple(float(b) for b in self.upsampling_factors))
        if not 0.0 < self.ratio_threshold < 1.0:
            raise ValueError("ratio_threshold must lie in (0, 1)")
        if not self.upsampling_factors or min(self.upsampling_factors) <= 0:
            raise ValueError("upsampling factors must be positive")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def to_dict(self) -> dict:
        return {"ratio_threshold": self.ratio_threshold, "upsampling_factors": list(self.upsampling_factors),
                "repeats": self.repeats}


def flag_threshold(upsampling: float) -> int:
    """``max(1, ceil(B))``: memorized samples tolerated at upsampling factor ``B``."""
    return max(1, math.ceil(upsampling - 1e-12))


def _points(x) -> np.ndarray:
    if isinstance(x, Trajectory):
        return x.points
    if isinstance(x, Dataset):
        return x.points
    return np.asarray(x, dtype=np.float64)


def _batch(xs) -> np.ndarray:
    if isinstance(xs, Dataset):
        return xs.points
    if isinstance(xs, np.ndarray):
        return np.asarray(xs, dtype=np.float64)
    return np.stack([_points(x) for x in xs]) if len(xs) else np.empty((0, 0, 2))


def _ids(reals) -> list[str]:
    if isinstance(reals, Dataset):
        return list(reals.ids)
    if isinstance(reals, np.ndarray):
        return [str(i) for i in range(reals.shape[0])]
    return [r.id if isinstance(r, Trajectory) else str(i) for i, r in enumerate(reals)]


def _ratios_from_sorted(d1: np.ndarray, d2: np.ndarray) -> np.ndarray:
    out = np.ones_like(d1)
    pos = d2 > 0
    out[pos] = d1[pos] / d2[pos]
    return out


def memorization_ratio(synthetic, reals) -> tuple[float, str, str]:
    """``(d1 / d2, nearest id, second-nearest id)`` over discrete Fréchet distances.

    ``d2 == 0`` (so ``d1 == 0``) gives ratio 1: the sample cannot single out
    one of several identical records. ``d1 == 0 < d2`` gives 0.

    Raises
    ------
    SingletonCellError
        Fewer than two reals.
    """
    pts = _batch(reals)
    if pts.shape[0] < 2:
        raise SingletonCellError("memorization ratio needs at least two real trajectories")
    d = kernels.frechet_one_to_many(_points(synthetic), pts)
    order = np.argsort(d, kind="stable")
    ids = _ids(reals)
    ratio = _ratios_from_sorted(d[order[:1]], d[order[1:2]])[0]
    return float(ratio), ids[order[0]], ids[order[1]]


def memorization_ratios(synthetic, reals) -> np.ndarray:
    """Vectorized :func:`memorization_ratio` for a batch of samples."""
    pts = _batch(reals)
    if pts.shape[0] < 2:
        raise SingletonCellError("memorization ratio needs at least two real trajectories")
    syn = _batch(synthetic)
    if syn.shape[0] == 0:
        return np.empty(0)
    d = np.partition(kernels.frechet_matrix(syn, pts), 1, axis=1)
    return _ratios_from_sorted(d[:, 0], d[:, 1])


def count_memorized(synthetic, reals, ratio_threshold: float = 0.5) -> int:
    return int(np.sum(memorization_ratios(synthetic, reals) < ratio_threshold))


# --------------------------------------------------------------------------
# audit


@dataclass
class ConditionAudit:
    """Memorized counts per (upsampling factor, repeat) for one condition.

    ``generated`` and ``memorized`` have shape ``(len(B), repeats)``;
    ``seeds`` holds the generator seed used for every cell of that grid so
    the same sample sets can be regenerated later.
    """

    cell_id: int
    test: MemorizationTest
    generated: np.ndarray
    memorized: np.ndarray
    seeds: np.ndarray
    flag: Flag
    reason: str = ""
    members: int = 0

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "flag": self.flag.value,
            "reason": self.reason,
            "members": self.members,
            "upsampling_factors": list(self.test.upsampling_factors),
            "generated": self.generated.tolist(),
            "memorized": self.memorized.tolist(),
        }


def flag_counts(memorized: np.ndarray, factors: Sequence[float]) -> Flag:
    """Flag from a ``(len(factors), repeats)`` count grid."""
    thr = np.array([flag_threshold(b) for b in factors])[:, None]
    above = np.asarray(memorized) > thr
    if above.size and above.all():
        return Flag.CERTAIN_RISK
    if above.any():
        return Flag.POTENTIALLY_AT_RISK
    return Flag.CLEAR


def _grid_seeds(seed: int, shape: tuple[int, int]) -> np.ndarray:
    ss = np.random.SeedSequence(seed)
    return ss.generate_state(shape[0] * shape[1], dtype=np.uint32).reshape(shape).astype(np.int64)


def audit_condition(cell_id: int, generator: Generator, reals, test: MemorizationTest = MemorizationTest(),
                    seed: int = 0) -> ConditionAudit:
    """Run the memorization test for one condition.

    For every upsampling factor ``B`` and repeat, draws
    ``max(1, floor(B * |K|))`` samples from ``generator`` and counts those
    with ratio below ``test.ratio_threshold`` against the condition's members
    ``reals``. The condition is ``potentially_at_risk`` if some count exceeds
    :func:`flag_threshold`, ``certain_risk`` if every count does. A cell with
    a single member is flagged ``potentially_at_risk`` without sampling.
    """
    pts = _batch(reals)
    nb, nr = len(test.upsampling_factors), test.repeats
    seeds = _grid_seeds(seed, (nb, nr))
    generated = np.array([[generated_count(b, pts.shape[0])] * nr for b in test.upsampling_factors], dtype=np.int64)
    memorized = np.zeros((nb, nr), dtype=np.int64)
    if pts.shape[0] < 2:
        return ConditionAudit(cell_id, test, generated, memorized, seeds, Flag.POTENTIALLY_AT_RISK, "singleton",
                              pts.shape[0])
    for i in range(nb):
        for r in range(nr):
            samples = np.asarray(generator(int(generated[i, r]), int(seeds[i, r])), dtype=np.float64)
            if samples.shape[0] != generated[i, r]:
                raise ValueError(f"generator returned {samples.shape[0]} samples, expected {generated[i, r]}")
            memorized[i, r] = count_memorized(samples, pts, test.ratio_threshold)
    flag = flag_counts(memorized, test.upsampling_factors)
    return ConditionAudit(cell_id, test, generated, memorized, seeds, flag, "", pts.shape[0])


def diffusion_generator(model, condition, guidance=None, sampler: str = "ddpm") -> Generator:
    """Adapter turning a trained denoiser and a condition vector into a :data:`Generator`."""
    from .diffusion import GuidanceConfig, sample

    guidance = guidance or GuidanceConfig()
    cond = np.asarray(condition, dtype=np.float64)

    def gen(count: int, seed: int) -> np.ndarray:
        return sample(model, cond, guidance, sampler, seed=seed, n=count)

    return gen


# --------------------------------------------------------------------------
# mitigation


def barycenter(trajectories) -> Trajectory:
    """Pointwise mean over a set of equal-length trajectories."""
    if isinstance(trajectories, (np.ndarray, Dataset)):
        pts = _batch(trajectories)
    else:
        arrs = [_points(t) for t in trajectories]
        if len({a.shape for a in arrs}) > 1:
            raise ValueError("trajectories must share one length")
        pts = np.stack(arrs) if arrs else np.empty((0, 0, 2))
    if pts.shape[0] < 1:
        raise ValueError("barycenter of an empty set")
    return Trajectory(pts.mean(axis=0), id="barycenter", source=Source.SYNTHETIC)


@dataclass(frozen=True)
class BallNoiseParams:
    """``delta`` radius, per-point Laplace scales ``(M, L)`` and the barycenter used."""

    delta: float
    scale: np.ndarray
    barycenter: Trajectory


def compute_delta(cell, lipschitz_L: float, i: int = 3) -> float:
    """``delta_i = L * d / 2**i`` with ``d`` the cell diagonal (or a float)."""
    d = float(cell.diagonal) if hasattr(cell, "diagonal") else float(cell)
    if not lipschitz_L > 0:
        raise ValueError("Lipschitz constant must be positive")
    if i < 1:
        raise ValueError("i must be >= 1")
    return lipschitz_L * d / 2.0 ** i


def ball_laplace(generated, delta: float, seed: int = 0) -> tuple[np.ndarray, BallNoiseParams]:
    """Laplace-perturb every point and keep it within ``delta`` of the barycenter point.

    For point ``p`` with barycenter point ``c``: ``dS = |delta - ||p - c|||``,
    ``b = dS / 100``, ``p' = p + Laplace(0, b)`` per coordinate; a ``p'``
    farther than ``delta`` from ``c`` is moved radially onto the sphere.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    pts = _batch(generated)
    if pts.shape[0] < 1:
        raise ValueError("need at least one trajectory")
    bc = barycenter(pts)
    c = bc.points[None]
    dist = np.linalg.norm(pts - c, axis=2)
    scale = np.abs(delta - dist) / 100.0
    rng = np.random.default_rng(seed)
    new = rng.laplace(pts, np.repeat(scale[:, :, None], 2, axis=2))
    off = new - c
    r = np.linalg.norm(off, axis=2)
    out = r > delta
    new[out] = c[0][np.nonzero(out)[1]] + delta * off[out] / r[out][:, None]
    return new, BallNoiseParams(float(delta), scale, bc)


def ball_laplace_mitigate(generated, delta: float, seed: int = 0) -> np.ndarray:
    return ball_laplace(generated, delta, seed)[0]


@dataclass(frozen=True)
class AnonymitySpec:
    k_anon: int
    delta: float

    def __post_init__(self):
        if self.k_anon < 2:
            raise ValueError("k_anon must be >= 2")
        if not self.delta > 0:
            raise ValueError("delta must be positive")


def verify_k_anonymity(trajectories, spec: AnonymitySpec) -> tuple[bool, tuple[int, int] | None]:
    """Check that at every time index each point has ``k - 1`` others within ``delta``.

    Returns ``(True, None)`` or ``(False, (time_index, trajectory_index))`` for
    the first violation found.
    """
    pts = _batch(trajectories)
    if pts.shape[0] < spec.k_anon:
        raise ValueError(f"need at least {spec.k_anon} trajectories")
    for t in range(pts.shape[1]):
        near = (cdist(pts[:, t], pts[:, t]) <= spec.delta).sum(axis=1)
        bad = np.nonzero(near < spec.k_anon)[0]
        if bad.size:
            return False, (t, int(bad[0]))
    return True, None


# --------------------------------------------------------------------------
# report


@dataclass
class ConditionReport:
    cell_id: int
    flag: Flag
    reason: str
    before: np.ndarray
    after: np.ndarray
    flag_after: Flag
    mitigated: bool
    delta: float | None = None
    lipschitz_L: float | None = None
    i: int | None = None

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "flag": self.flag.value,
            "reason": self.reason,
            "memorized_before": np.asarray(self.before).tolist(),
            "memorized_after": np.asarray(self.after).tolist(),
            "flag_after": self.flag_after.value,
            "mitigated": self.mitigated,
            "delta": self.delta,
            "lipschitz_L": self.lipschitz_L,
            "i": self.i,
        }


@dataclass
class AuditReport:
    test: MemorizationTest
    rows: list[ConditionReport]
    lipschitz: list[dict] = field(default_factory=list)

    @property
    def flagged_before(self) -> int:
        return sum(r.flag != Flag.CLEAR for r in self.rows)

    @property
    def flagged_after(self) -> int:
        return sum(r.flag_after != Flag.CLEAR for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "test": self.test.to_dict(),
            "flagged_before": self.flagged_before,
            "flagged_after": self.flagged_after,
            "conditions": [r.to_dict() for r in self.rows],
            "lipschitz": list(self.lipschitz),
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def boxplot_rows(self) -> list[dict]:
        """Quartiles and mean of memorized counts per upsampling factor, before and after."""
        rows = []
        for stage in ("before", "after"):
            for j, b in enumerate(self.test.upsampling_factors):
                vals = np.concatenate([np.asarray(getattr(r, stage))[j] for r in self.rows]) if self.rows else np.zeros(0)
                if vals.size == 0:
                    continue
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                rows.append({"stage": stage, "B": b, "threshold": flag_threshold(b), "q1": q1, "median": med,
                             "q3": q3, "min": vals.min(), "max": vals.max(), "mean": vals.mean()})
        return rows

    def write_boxplot_csv(self, path) -> None:
        rows = self.boxplot_rows()
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["stage", "B", "threshold", "q1", "median", "q3", "min", "max", "mean"])
            w.writeheader()
            w.writerows(rows)


def mitigate_and_reaudit(audits: Sequence[ConditionAudit], generators: Mapping[int, Generator],
                         reals: Mapping[int, np.ndarray], cells: Mapping[int, object],
                         lipschitz: Mapping[int, float], i: int = 3, seed: int = 0) -> AuditReport:
    """Mitigate every flagged condition and recount memorized samples.

    A flagged condition's sample sets are regenerated from the audit's seeds
    and pooled into one generated set, which goes through
    :func:`ball_laplace_mitigate` with ``delta = compute_delta(cell, L, i)``
    (so all sets share the barycenter of everything generated for the
    condition). The counts are then recomputed per (B, repeat). Clear
    conditions pass through with unchanged counts; singleton cells cannot be
    recounted and keep their flag.
    """
    if not audits:
        return AuditReport(MemorizationTest(), [])
    test = audits[0].test
    rows = []
    for k, a in enumerate(audits):
        if a.flag == Flag.CLEAR or a.reason == "singleton":
            rows.append(ConditionReport(a.cell_id, a.flag, a.reason, a.memorized, a.memorized.copy(), a.flag, False))
            continue
        L = float(lipschitz[a.cell_id])
        delta = compute_delta(cells[a.cell_id], L, i)
        pts = _batch(reals[a.cell_id])
        gen = generators[a.cell_id]
        sets = [gen(int(a.generated[j, r]), int(a.seeds[j, r]))
                for j in range(a.generated.shape[0]) for r in range(a.generated.shape[1])]
        pooled = ball_laplace_mitigate(np.concatenate(sets), delta, seed + k)
        after = np.zeros_like(a.memorized)
        start = 0
        for j in range(a.generated.shape[0]):
            for r in range(a.generated.shape[1]):
                n = int(a.generated[j, r])
                after[j, r] = count_memorized(pooled[start : start + n], pts, a.test.ratio_threshold)
                start += n
        rows.append(ConditionReport(a.cell_id, a.flag, a.reason, a.memorized, after,
                                    flag_counts(after, test.upsampling_factors), True, delta, L, i))
    return AuditReport(test, rows)
