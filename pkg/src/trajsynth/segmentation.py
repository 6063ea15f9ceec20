"""KD-tree segmentation of the VAE latent space into condition cells."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import Dataset

INFLATE = 0.01
FLAT_PAD = 1e-3


@dataclass(frozen=True)
class LatentCell:
    """Axis-aligned box in latent space; one KD-tree leaf."""

    cell_id: int
    lower: np.ndarray
    upper: np.ndarray
    member_ids: tuple[str, ...]

    @property
    def diagonal(self) -> float:
        return cell_diagonal(self)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_extent(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, mu, atol: float = 0.0) -> bool:
        mu = np.asarray(mu)
        return bool(np.all(mu >= self.lower - atol) and np.all(mu <= self.upper + atol))


def cell_diagonal(cell: LatentCell) -> float:
    return float(np.linalg.norm(np.asarray(cell.upper, dtype=np.float64) - np.asarray(cell.lower, dtype=np.float64)))


def condition_vector(cell: LatentCell) -> np.ndarray:
    """``(c_1..c_n, h_1..h_n)``: cell center followed by half-extents."""
    return np.concatenate([cell.center, cell.half_extent])


def null_condition(latent_dim: int) -> np.ndarray:
    return np.zeros(2 * latent_dim)


@dataclass(frozen=True)
class SegmentationIndex:
    """Flattened KD-tree.

    Internal node ``k`` splits on ``dims[k]`` at ``thresholds[k]``: points with
    ``x[dim] <= threshold`` go to ``left[k]``. Leaves have ``dims[k] == -1``
    and ``leaf_cell[k]`` gives the cell index.
    """

    dims: np.ndarray
    thresholds: np.ndarray
    left: np.ndarray
    right: np.ndarray
    leaf_cell: np.ndarray
    cells: tuple[LatentCell, ...]
    box_lower: np.ndarray
    box_upper: np.ndarray
    depth: int

    @property
    def latent_dim(self) -> int:
        return self.box_lower.shape[0]

    def clip(self, mus) -> tuple[np.ndarray, np.ndarray]:
        mus = np.atleast_2d(np.asarray(mus, dtype=np.float64))
        clipped = np.clip(mus, self.box_lower, self.box_upper)
        return clipped, np.any(clipped != mus, axis=1)

    def lookup_many(self, mus) -> tuple[np.ndarray, np.ndarray]:
        """Cell index for each row of ``mus`` and whether it had to be clipped."""
        x, was_clipped = self.clip(mus)
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            inner = self.dims[node] >= 0
            if not inner.any():
                break
            k = node[inner]
            go_left = x[inner, self.dims[k]] <= self.thresholds[k]
            node[inner] = np.where(go_left, self.left[k], self.right[k])
        return self.leaf_cell[node], was_clipped

    def lookup(self, mu) -> LatentCell:
        idx, _ = self.lookup_many(np.asarray(mu, dtype=np.float64)[None])
        return self.cells[int(idx[0])]

    def member_map(self) -> dict[str, int]:
        return {tid: c.cell_id for c in self.cells for tid in c.member_ids}

    # serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for k in range(self.dims.shape[0]):
            if self.dims[k] < 0:
                nodes.append({"leaf": int(self.leaf_cell[k])})
            else:
                nodes.append(
                    {
                        "dim": int(self.dims[k]),
                        "threshold": float(self.thresholds[k]),
                        "left": int(self.left[k]),
                        "right": int(self.right[k]),
                    }
                )
        return {
            "depth": self.depth,
            "box": {"lower": self.box_lower.tolist(), "upper": self.box_upper.tolist()},
            "nodes": nodes,
            "leaves": [
                {"id": c.cell_id, "lower": c.lower.tolist(), "upper": c.upper.tolist(), "member_ids": list(c.member_ids)}
                for c in self.cells
            ],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SegmentationIndex":
        nodes = d["nodes"]
        n = len(nodes)
        dims = np.full(n, -1, dtype=np.int64)
        thr = np.zeros(n)
        left = np.full(n, -1, dtype=np.int64)
        right = np.full(n, -1, dtype=np.int64)
        leaf = np.full(n, -1, dtype=np.int64)
        for k, node in enumerate(nodes):
            if "leaf" in node:
                leaf[k] = node["leaf"]
            else:
                dims[k], thr[k], left[k], right[k] = node["dim"], node["threshold"], node["left"], node["right"]
        cells = tuple(
            LatentCell(int(c["id"]), np.asarray(c["lower"], float), np.asarray(c["upper"], float), tuple(c["member_ids"]))
            for c in d["leaves"]
        )
        return cls(
            dims, thr, left, right, leaf, cells,
            np.asarray(d["box"]["lower"], float), np.asarray(d["box"]["upper"], float), int(d["depth"]),
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SegmentationIndex":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _bounding_box(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = x.min(axis=0), x.max(axis=0)
    width = hi - lo
    pad = np.where(width > 0, INFLATE * width, FLAT_PAD)
    return lo - pad, hi + pad


def build_tree(means, depth: int, ids: Sequence[str] | None = None) -> SegmentationIndex:
    """Median-split KD-tree over latent means.

    ``means`` is either a mapping ``id -> vector`` or an ``(N, n)`` array with
    ``ids``. Each node splits its widest dimension (by spread of the points it
    holds) at the median; points equal to the threshold go left. A branch stops
    early when it holds fewer than 2 points or a split would leave one side
    empty. Leaves are clipped to the means' bounding box inflated by 1% per
    side.
    """
    if isinstance(means, Mapping):
        ids = list(means.keys())
        x = np.array([np.asarray(means[k], dtype=np.float64) for k in ids])
    else:
        x = np.asarray(means, dtype=np.float64)
        ids = [str(i) for i in (ids if ids is not None else range(len(x)))]
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need at least one latent mean of shape (N, n)")
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if not np.all(np.isfinite(x)):
        raise ValueError("latent means must be finite")
    lo, hi = _bounding_box(x)
    dims, thr, left, right, leaf = [], [], [], [], []
    cells: list[LatentCell] = []

    def new_node():
        dims.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf.append(-1)
        return len(dims) - 1

    root = new_node()
    stack = [(root, np.arange(x.shape[0]), lo.copy(), hi.copy(), 0)]
    # depth-first, left child processed first so cell ids run left to right
    while stack:
        node, idx, clo, chi, level = stack.pop()
        split = None
        if level < depth and idx.size >= 2:
            pts = x[idx]
            spread = pts.max(axis=0) - pts.min(axis=0)
            dim = int(np.argmax(spread))
            if spread[dim] > 0:
                t = float(np.median(pts[:, dim]))
                mask = pts[:, dim] <= t
                if mask.any() and not mask.all():
                    split = (dim, t, mask)
        if split is None:
            leaf[node] = len(cells)
            cells.append(LatentCell(len(cells), clo, chi, tuple(ids[i] for i in idx)))
            continue
        dim, t, mask = split
        ln, rn = new_node(), new_node()
        dims[node], thr[node], left[node], right[node] = dim, t, ln, rn
        lhi = chi.copy()
        lhi[dim] = t
        rlo = clo.copy()
        rlo[dim] = t
        stack.append((rn, idx[~mask], rlo, chi.copy(), level + 1))
        stack.append((ln, idx[mask], clo.copy(), lhi, level + 1))
    return SegmentationIndex(
        np.array(dims, dtype=np.int64), np.array(thr), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(leaf, dtype=np.int64), tuple(cells), lo, hi, depth,
    )


def project_means(vae, dataset: Dataset) -> dict[str, np.ndarray]:
    """Latent mean of every trajectory, keyed by id (dataset order)."""
    mu, _ = vae.encode_batch(dataset.points)
    return {tid: mu[k] for k, tid in enumerate(dataset.ids)}


def condition_of(index: SegmentationIndex, mu) -> np.ndarray:
    """Condition vector of the leaf containing ``mu`` (clipped into the box)."""
    return condition_vector(index.lookup(mu))


def conditions_for(index: SegmentationIndex, dataset_ids: Sequence[str]) -> np.ndarray:
    """Per-trajectory condition vectors via cell membership."""
    members = index.member_map()
    table = np.stack([condition_vector(c) for c in index.cells])
    return table[[members[t] for t in dataset_ids]]


def depth_for(target_conditions: int) -> int:
    """Smallest depth whose complete tree has at least ``target_conditions`` leaves."""
    return max(0, int(np.ceil(np.log2(max(1, target_conditions)))))
