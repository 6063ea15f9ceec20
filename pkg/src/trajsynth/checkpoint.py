"""Model checkpoint container.

A checkpoint is a numpy ``.npz`` archive. The entry ``__meta__`` holds a
UTF-8 JSON document::

    {"format": "trajsynth-checkpoint", "version": 1, "kind": "vae" | "diffusion",
     "config": {...}, "extra": {...}}

Every other entry is a named parameter tensor (``float32`` or ``float64``),
keyed by its ``state_dict`` name. Diffusion checkpoints prefix EMA shadow
tensors with ``ema.``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT = "trajsynth-checkpoint"
VERSION = 1


def save_checkpoint(path, kind: str, config: dict, tensors: dict, extra: dict | None = None) -> None:
    meta = {"format": FORMAT, "version": VERSION, "kind": kind, "config": config, "extra": extra or {}}
    arrays = {name: np.asarray(value) for name, value in tensors.items()}
    if "__meta__" in arrays:
        raise ValueError("tensor name '__meta__' is reserved")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=blob, **arrays)


def load_checkpoint(path, kind: str | None = None) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        tensors = {k: archive[k] for k in archive.files if k != "__meta__"}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    if kind is not None and meta.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
    return meta, tensors
