"""Trajectory types, normalization, Fréchet distance and file I/O."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from . import kernels

DEFAULT_LENGTH = 256


class Source(str, enum.Enum):
    REAL = "real"
    SYNTHETIC = "synthetic"
    PERTURBED = "perturbed"


class TrajectoryFormatError(ValueError):
    """Raised for malformed trajectory files."""


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray
    id: str = ""
    source: Source = Source.REAL

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"trajectory points must have shape (L, 2), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "source", Source(self.source))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class AffineMap:
    """Per-axis affine map between raw bounds and ``[-1, 1]``."""

    lower: tuple[float, float]
    upper: tuple[float, float]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        bad = [ax for ax, (a, b) in zip("xy", zip(lo, hi)) if not b > a]
        if bad:
            raise ValueError(f"degenerate bounds on axis {','.join(bad)}: {self.lower} .. {self.upper}")
        object.__setattr__(self, "lower", (float(lo[0]), float(lo[1])))
        object.__setattr__(self, "upper", (float(hi[0]), float(hi[1])))

    def forward(self, raw: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return 2.0 * (np.asarray(raw, dtype=np.float64) - lo) / (hi - lo) - 1.0

    def inverse(self, norm: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return (np.asarray(norm, dtype=np.float64) + 1.0) * 0.5 * (hi - lo) + lo

    def scale(self) -> np.ndarray:
        """Raw units per normalized unit, per axis."""
        return 0.5 * (np.asarray(self.upper) - np.asarray(self.lower))

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineMap":
        return cls(tuple(d["lower"]), tuple(d["upper"]))


@dataclass(frozen=True)
class Dataset:
    """A set of equal-length trajectories stored as one ``(N, L, 2)`` array.

    ``normalization`` is ``None`` for raw data; for normalized data it maps
    raw coordinates to ``[-1, 1]``. ``bounds`` are always in raw units and are
    ``None`` when the dataset is empty.
    """

    points: np.ndarray
    ids: tuple[str, ...]
    sources: tuple[Source, ...] = ()
    normalization: AffineMap | None = None
    bounds: tuple[float, float, float, float] | None = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, pts.shape[1] if pts.ndim == 3 else 0, 2)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ValueError(f"dataset points must have shape (N, L, 2), got {pts.shape}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != pts.shape[0]:
            raise ValueError(f"{len(ids)} ids for {pts.shape[0]} trajectories")
        object.__setattr__(self, "ids", ids)
        sources = tuple(Source(s) for s in self.sources) or (Source.REAL,) * len(ids)
        if len(sources) != len(ids):
            raise ValueError("sources and ids differ in length")
        object.__setattr__(self, "sources", sources)
        if self.bounds is None and pts.shape[0] > 0:
            raw = pts if self.normalization is None else self.normalization.inverse(pts)
            b = (raw[..., 0].min(), raw[..., 1].min(), raw[..., 0].max(), raw[..., 1].max())
            object.__setattr__(self, "bounds", tuple(float(v) for v in b))

    def __len__(self) -> int:
        return self.points.shape[0]

    def __iter__(self) -> Iterator[Trajectory]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k: int) -> Trajectory:
        return Trajectory(self.points[k], self.ids[k], self.sources[k])

    @property
    def length(self) -> int:
        return self.points.shape[1]

    @property
    def bounds_defined(self) -> bool:
        return self.bounds is not None

    @property
    def is_normalized(self) -> bool:
        return self.normalization is not None

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return replace(
            self,
            points=self.points[index],
            ids=tuple(self.ids[i] for i in index),
            sources=tuple(self.sources[i] for i in index),
            bounds=self.bounds if self.normalization is not None else None,
        )

    def index_of(self) -> dict[str, int]:
        return {tid: k for k, tid in enumerate(self.ids)}

    @classmethod
    def from_trajectories(
        cls, trajectories: Iterable[Trajectory], normalization: AffineMap | None = None
    ) -> "Dataset":
        trajs = list(trajectories)
        if not trajs:
            return cls(np.empty((0, 0, 2)), (), (), normalization)
        lengths = {len(t) for t in trajs}
        if len(lengths) != 1:
            raise ValueError(f"trajectories have differing lengths {sorted(lengths)}")
        return cls(
            np.stack([t.points for t in trajs]),
            tuple(t.id for t in trajs),
            tuple(t.source for t in trajs),
            normalization,
        )


def normalize(dataset: Dataset) -> Dataset:
    """Map a raw dataset to ``[-1, 1]`` per axis using its bounds."""
    if dataset.is_normalized:
        return dataset
    if dataset.bounds is None:
        raise ValueError("cannot normalize an empty dataset")
    x0, y0, x1, y1 = dataset.bounds
    amap = AffineMap((x0, y0), (x1, y1))
    pts = np.clip(amap.forward(dataset.points), -1.0, 1.0)
    return Dataset(pts, dataset.ids, dataset.sources, amap, dataset.bounds)


def normalize_with(dataset: Dataset, amap: AffineMap) -> Dataset:
    """Normalize with an existing map (e.g. the training set's), no clipping."""
    if dataset.is_normalized:
        dataset = denormalize(dataset)
    return Dataset(amap.forward(dataset.points), dataset.ids, dataset.sources, amap, dataset.bounds)


def denormalize(dataset: Dataset) -> Dataset:
    if not dataset.is_normalized:
        return dataset
    raw = dataset.normalization.inverse(dataset.points)
    return Dataset(raw, dataset.ids, dataset.sources, None)


def discrete_frechet(a, b) -> float:
    """Discrete Fréchet distance with Euclidean ground metric.

    Accepts :class:`Trajectory` objects or ``(n, 2)`` arrays.
    """
    pa = a.points if isinstance(a, Trajectory) else a
    pb = b.points if isinstance(b, Trajectory) else b
    return kernels.frechet(pa, pb)


@dataclass(frozen=True)
class DistanceMatrixEntry:
    synthetic_id: str
    real_id: str
    frechet: float


def distance_entries(synthetic: Dataset, real: Dataset) -> list[DistanceMatrixEntry]:
    mat = kernels.frechet_matrix(synthetic.points, real.points)
    return [
        DistanceMatrixEntry(s, r, float(mat[i, j]))
        for i, s in enumerate(synthetic.ids)
        for j, r in enumerate(real.ids)
    ]


# --------------------------------------------------------------------------
# file I/O

CSV_HEADER = ["id", "source", "i", "x", "y"]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is None:
        fmt = path.suffix.lstrip(".").lower()
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported trajectory format {fmt!r} (expected csv or jsonl)")
    return fmt


def write_trajectories(dataset: Dataset, path, fmt: str | None = None) -> None:
    """Write coordinates exactly as stored (normalized or raw)."""
    path = Path(path)
    fmt = _infer_format(path, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if fmt == "csv":
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for tid, src, pts in zip(dataset.ids, dataset.sources, dataset.points):
                for i, (x, y) in enumerate(pts):
                    w.writerow([tid, src.value, i, _fmt(x), _fmt(y)])
        else:
            for tid, src, pts in zip(dataset.ids, dataset.sources, dataset.points):
                rec = {"id": tid, "source": src.value, "points": pts.tolist()}
                fh.write(json.dumps(rec) + "\n")


def _check_length(tid, n, length, where):
    if n != length:
        raise TrajectoryFormatError(f"{where}: record {tid!r} has {n} points, expected {length}")


def read_trajectories(
    path, fmt: str | None = None, length: int | None = None, normalization: AffineMap | None = None
) -> Dataset:
    """Read a trajectory file.

    ``length`` enforces the point count per record; when omitted the first
    record fixes it. Pass ``normalization`` when the file holds normalized
    coordinates.
    """
    path = Path(path)
    fmt = _infer_format(path, fmt)
    ids: list[str] = []
    sources: list[Source] = []
    arrays: list[np.ndarray] = []
    if fmt == "csv":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return Dataset(np.empty((0, length or 0, 2)), (), (), normalization)
            if [h.strip() for h in header] != CSV_HEADER:
                raise TrajectoryFormatError(f"{path}: bad header {header}")
            cur_id, cur_src, cur_pts, start_row = None, None, [], 2
            for rowno, row in enumerate(reader, start=2):
                if not row:
                    continue
                try:
                    tid, src, i, x, y = row
                    i, x, y = int(i), float(x), float(y)
                    src = Source(src)
                except (ValueError, TypeError) as exc:
                    raise TrajectoryFormatError(f"{path}: row {rowno}: cannot parse {row}") from exc
                if tid != cur_id:
                    if cur_id is not None:
                        ids.append(cur_id)
                        sources.append(cur_src)
                        arrays.append(np.array(cur_pts))
                    cur_id, cur_src, cur_pts, start_row = tid, src, [], rowno
                if i != len(cur_pts):
                    raise TrajectoryFormatError(
                        f"{path}: row {rowno}: record {tid!r} point index {i}, expected {len(cur_pts)}"
                    )
                cur_pts.append((x, y))
            if cur_id is not None:
                ids.append(cur_id)
                sources.append(cur_src)
                arrays.append(np.array(cur_pts))
    else:
        with open(path) as fh:
            for rowno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    pts = np.asarray(rec["points"], dtype=np.float64).reshape(-1, 2)
                    tid = str(rec["id"])
                    src = Source(rec.get("source", "real"))
                except (ValueError, KeyError, TypeError) as exc:
                    raise TrajectoryFormatError(f"{path}: line {rowno}: cannot parse record") from exc
                ids.append(tid)
                sources.append(src)
                arrays.append(pts)
    if not arrays:
        return Dataset(np.empty((0, length or 0, 2)), (), (), normalization)
    expected = length if length is not None else len(arrays[0])
    for tid, arr in zip(ids, arrays):
        _check_length(tid, len(arr), expected, str(path))
    return Dataset(np.stack(arrays), tuple(ids), tuple(sources), normalization)


def read_any(paths: Sequence) -> Dataset:
    parts = [read_trajectories(p) for p in paths]
    pts = np.concatenate([p.points for p in parts])
    return Dataset(pts, sum((p.ids for p in parts), ()), sum((p.sources for p in parts), ()))
