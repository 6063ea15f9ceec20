"""Procedural town-world simulator and GeoLife-style GPS log ingestion."""

from __future__ import annotations

import datetime as _dt
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DEFAULT_LENGTH, Dataset, Source

log = logging.getLogger(__name__)


class AgentKind(str, enum.Enum):
    DAILY_WORKER = "daily_worker"
    TRAVELER = "traveler"


@dataclass(frozen=True)
class Town:
    center: tuple[float, float]
    radius: float


def ring_towns(n: int = 5, world: float = 100.0, radius: float = 1.0, ring: float = 0.35) -> tuple[Town, ...]:
    """``n`` towns evenly spaced on a ring centred in a ``world`` x ``world`` square."""
    c = world / 2.0
    r = ring * world
    return tuple(
        Town((c + r * math.cos(2 * math.pi * k / n), c + r * math.sin(2 * math.pi * k / n)), radius)
        for k in range(n)
    )


@dataclass(frozen=True)
class WorldSpec:
    towns: tuple[Town, ...] = field(default_factory=ring_towns)
    population: int = 10_010
    traveler_fraction: float = 0.001
    seed: int = 0
    points_per_trajectory: int = DEFAULT_LENGTH

    def __post_init__(self):
        object.__setattr__(self, "towns", tuple(t if isinstance(t, Town) else Town(*t) for t in self.towns))
        errors = []
        if len(self.towns) < 2:
            errors.append("at least 2 towns are required")
        if any(t.radius <= 0 for t in self.towns):
            errors.append("town radii must be > 0")
        if len({tuple(t.center) for t in self.towns}) != len(self.towns):
            errors.append("town centers must be distinct")
        if not 0.0 <= self.traveler_fraction <= 1.0:
            errors.append("traveler_fraction must lie in [0, 1]")
        if self.points_per_trajectory < 2:
            errors.append("points_per_trajectory must be >= 2")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def centers(self) -> np.ndarray:
        return np.array([t.center for t in self.towns], dtype=np.float64)

    @property
    def radii(self) -> np.ndarray:
        return np.array([t.radius for t in self.towns], dtype=np.float64)

    def jitter_sigma(self) -> np.ndarray:
        return self.radii / 4.0


def _resample_polyline(waypoints: np.ndarray, n: int) -> np.ndarray:
    seg = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0.0:
        return np.repeat(waypoints[:1], n, axis=0)
    s = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(s, cum, waypoints[:, 0]), np.interp(s, cum, waypoints[:, 1])])


def _jittered(spec: WorldSpec, towns: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    centers = spec.centers[list(towns)]
    sigma = spec.jitter_sigma()[list(towns)]
    offs = rng.normal(size=centers.shape) * sigma[:, None]
    # cap at 4 sigma (= the town radius) so waypoints stay inside their disc
    norm = np.linalg.norm(offs, axis=1)
    cap = 4.0 * sigma
    scale = np.where(norm > cap, cap / np.maximum(norm, 1e-300), 1.0)
    return centers + offs * scale[:, None]


def _worker_route(n_towns: int, rng: np.random.Generator) -> list[int]:
    home, work = rng.choice(n_towns, size=2, replace=False)
    others = [t for t in range(n_towns) if t not in (home, work)]
    k = int(rng.integers(0, min(2, len(others)) + 1))
    inter = list(rng.choice(others, size=k, replace=False)) if k else []
    return [int(home), *map(int, inter), int(work)]


def _traveler_route(n_towns: int, rng: np.random.Generator) -> list[int]:
    hops = int(rng.integers(2, 2 * n_towns + 1))
    route = [int(rng.integers(n_towns))]
    for _ in range(hops):
        nxt = int(rng.integers(n_towns - 1))
        route.append(nxt + (nxt >= route[-1]))
    if route[-1] == route[0]:
        choices = [t for t in range(n_towns) if t not in (route[0], route[-2])]
        if not choices:
            # two towns: walk one more hop to the other town
            route.append(1 - route[-1])
        else:
            route[-1] = int(rng.choice(choices))
    return route


def simulate_with_kinds(spec: WorldSpec, n_trajectories: int) -> tuple[Dataset, list[AgentKind], list[list[int]]]:
    """Simulate and also return each trajectory's agent kind and town route."""
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    n_towns = len(spec.towns)
    L = spec.points_per_trajectory
    children = np.random.SeedSequence(spec.seed).spawn(n_trajectories)
    out = np.empty((n_trajectories, L, 2))
    kinds, routes = [], []
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        if rng.random() < spec.traveler_fraction:
            kind, route = AgentKind.TRAVELER, _traveler_route(n_towns, rng)
        else:
            kind, route = AgentKind.DAILY_WORKER, _worker_route(n_towns, rng)
        out[k] = _resample_polyline(_jittered(spec, route, rng), L)
        kinds.append(kind)
        routes.append(route)
    ids = tuple(f"sim-{k:07d}" for k in range(n_trajectories))
    return Dataset(out, ids, (Source.REAL,) * n_trajectories), kinds, routes


def simulate(spec: WorldSpec, n_trajectories: int) -> Dataset:
    """Rule-based town world: daily workers and rare travelers.

    Daily workers go from a home town to a different work town through at
    most two intermediate towns; travelers random-walk over towns and always
    end in a town other than their start. Paths are straight segments between
    jittered town centers, resampled to ``L`` equally spaced points.
    Deterministic given ``spec.seed``.
    """
    return simulate_with_kinds(spec, n_trajectories)[0]


def town_of(point, spec: WorldSpec) -> int:
    """Index of the town whose disc contains ``point``, or -1."""
    d = np.linalg.norm(spec.centers - np.asarray(point, dtype=np.float64), axis=1)
    inside = np.flatnonzero(d <= spec.radii + 1e-12)
    if inside.size == 0:
        return -1
    return int(inside[np.argmin(d[inside])])


# --------------------------------------------------------------------------
# GPS logs

PLT_HEADER_LINES = 6
_EPOCH = _dt.datetime(1970, 1, 1)


class IngestError(RuntimeError):
    pass


@dataclass(frozen=True)
class GpsLog:
    """One PLT file: rows of (lat, lon, timestamp seconds)."""

    records: np.ndarray
    user_id: str
    name: str = ""
    skipped: int = 0

    def __len__(self) -> int:
        return self.records.shape[0]


def _parse_plt_row(line: str) -> tuple[float, float, float] | None:
    parts = line.strip().split(",")
    if len(parts) < 7:
        return None
    try:
        lat, lon = float(parts[0]), float(parts[1])
        stamp = _dt.datetime.strptime(parts[5].strip() + " " + parts[6].strip(), "%Y-%m-%d %H:%M:%S")
    except ValueError:
        return None
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
        return None
    if not (math.isfinite(lat) and math.isfinite(lon)):
        return None
    return lat, lon, (stamp - _EPOCH).total_seconds()


def _user_of(path: Path, root: Path) -> str:
    parts = path.relative_to(root).parts
    if "Trajectory" in parts:
        idx = parts.index("Trajectory")
        if idx > 0:
            return parts[idx - 1]
    return path.parent.name or "user"


def ingest_plt(directory) -> list[GpsLog]:
    """Parse every ``*.plt`` file below ``directory``.

    Files follow the GeoLife layout: six header lines, then rows
    ``lat,lon,0,altitude,days,date,time``. Malformed or out-of-range rows are
    skipped and counted in :attr:`GpsLog.skipped`; unreadable files are
    skipped with a warning.
    """
    root = Path(directory)
    files = sorted(root.rglob("*.plt")) + sorted(root.rglob("*.PLT"))
    if not files:
        raise IngestError(f"no logs found under {root}")
    logs, total_skipped = [], 0
    for path in files:
        try:
            lines = path.read_text(errors="strict").splitlines()
        except (OSError, UnicodeDecodeError) as exc:
            log.warning("skipping unreadable file %s: %s", path, exc)
            continue
        rows, skipped = [], 0
        for line in lines[PLT_HEADER_LINES:]:
            if not line.strip():
                continue
            row = _parse_plt_row(line)
            if row is None:
                skipped += 1
            else:
                rows.append(row)
        total_skipped += skipped
        if not rows:
            log.warning("no parsable rows in %s", path)
            continue
        rec = np.array(rows, dtype=np.float64)
        rec = rec[np.argsort(rec[:, 2], kind="stable")]
        logs.append(GpsLog(rec, _user_of(path, root), path.stem, skipped))
    if not logs:
        raise IngestError(f"zero parsable rows in {len(files)} files under {root}")
    if total_skipped:
        log.info("skipped %d malformed rows", total_skipped)
    return logs


def _resample_uniform(t: np.ndarray, xy: np.ndarray) -> np.ndarray:
    grid = np.linspace(t[0], t[-1], t.size)
    return np.column_stack([np.interp(grid, t, xy[:, 0]), np.interp(grid, t, xy[:, 1])])


def _fit_length(xy: np.ndarray, L: int) -> np.ndarray:
    n = xy.shape[0]
    if n == L:
        return xy
    if n < L:
        return np.concatenate([xy, np.repeat(xy[-1:], L - n, axis=0)])
    idx = np.round(np.linspace(0, n - 1, L)).astype(int)
    return xy[idx]


def preprocess(
    logs: Sequence[GpsLog],
    bbox: tuple[float, float, float, float],
    window_minutes: float = 30.0,
    L: int = DEFAULT_LENGTH,
) -> Dataset:
    """Filter to ``bbox``, cut into time windows and fix every window to ``L`` points.

    ``bbox`` is ``(min_lon, min_lat, max_lon, max_lat)``; output points are
    ``(x=lon, y=lat)``. Each window is resampled onto uniform timestamps
    (same point count), short windows are padded by repeating the final point,
    long ones are uniformly subsampled.
    """
    x0, y0, x1, y1 = bbox
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"invalid bbox {bbox}")
    if window_minutes <= 0:
        raise ValueError("window_minutes must be > 0")
    width = 60.0 * window_minutes
    trajs, ids = [], []
    for k, g in enumerate(logs):
        lat, lon, t = g.records[:, 0], g.records[:, 1], g.records[:, 2]
        keep = (lon >= x0) & (lon <= x1) & (lat >= y0) & (lat <= y1)
        if not keep.any():
            continue
        lat, lon, t = lat[keep], lon[keep], t[keep]
        win = np.floor((t - t[0]) / width).astype(np.int64)
        for w in np.unique(win):
            sel = win == w
            if sel.sum() < 2:
                continue
            tw = t[sel]
            xy = np.column_stack([lon[sel], lat[sel]])
            if tw[-1] > tw[0]:
                xy = _resample_uniform(tw, xy)
            trajs.append(_fit_length(xy, L))
            ids.append(f"{g.user_id}-{g.name or k}-{int(w)}")
    if not trajs:
        log.warning("preprocess: every window was discarded (bbox %s)", bbox)
        return Dataset(np.empty((0, L, 2)), ())
    return Dataset(np.stack(trajs), tuple(ids))
