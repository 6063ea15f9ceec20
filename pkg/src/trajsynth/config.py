"""Pipeline configuration: YAML loading, defaults and validation."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import yaml

from .datagen import WorldSpec, ring_towns
from .diffusion import DiffusionConfig, GuidanceConfig
from .metrics import Grid, MetricSettings
from .privacy import MemorizationTest
from .vae import VaeConfig

OUTPUT_ENV = "TRAJSYNTH_OUTPUT_DIR"

# Desk-scale reference values. Paper-scale sizes (65k conditions, U-Net
# widths up to 512) are reachable by overriding the same keys.
DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "dataset": {
        "source": "simulate",
        "length": 256,
        "holdout_fraction": 0.1,
        "simulate": {
            "n_towns": 5,
            "world": 100.0,
            "town_radius": 1.0,
            "ring": 0.35,
            "population": 10_010,
            "traveler_fraction": 0.001,
        },
        "ingest": {
            "paths": [],
            "bbox": None,
            "window_minutes": 30.0,
        },
    },
    "vae": {
        "latent_dim": 4,
        "channels": [16, 32, 64],
        "lambda_rec": 1.0,
        "kl_weight": 0.1,
        "learning_rate": 1e-3,
        "epochs": 50,
        "batch_size": 256,
    },
    "segmentation": {
        "depth": 10,
    },
    "diffusion": {
        "widths": [32, 64, 128, 128],
        "time_dim": 64,
        "emb_dim": 128,
        "attention": True,
        "T": 500,
        "schedule": "cosine",
        "beta_range": [1e-4, 0.02],
        "learning_rate": 2e-4,
        "lr_schedule": "constant",
        "batch_size": 256,
        "epochs": 100,
        "cond_dropout": 0.1,
        "ema_decay": 0.9999,
        "grad_clip": 1.0,
    },
    "guidance": {
        "scales": [1.0, 2.5],
        "sampler": "ddpm",
    },
    "generation": {
        "n_samples": 10_000,
    },
    "privacy": {
        "ratio_threshold": 0.5,
        "upsampling_factors": [0.5, 1, 2, 4, 8, 16],
        "repeats": 10,
        "i": 3,
        "max_conditions": None,
        "lipschitz_samples": 300,
        "lipschitz_iters": 100,
        "lipschitz_mode": "per_step_max",
    },
    "metrics": {
        "cells_x": 64,
        "cells_y": 64,
        "top_n": 100,
        "threshold": None,
        "horizon": None,
        "n_runs": 4,
        "n_samples": 10_000,
        "step_seconds": 1.0,
        "meters_per_unit": None,
    },
}

# keys whose default is None, with the type they take when set
_OPTIONAL = {
    ("dataset", "ingest", "bbox"): list,
    ("privacy", "max_conditions"): int,
    ("metrics", "threshold"): float,
    ("metrics", "horizon"): int,
    ("metrics", "meters_per_unit"): float,
}


def _positive(v) -> bool:
    return v > 0


def _nonneg(v) -> bool:
    return v >= 0


def _unit_open(v) -> bool:
    return 0.0 < v < 1.0


def _unit_half_open(v) -> bool:
    return 0.0 <= v < 1.0


_CHECKS: dict[tuple, tuple[Callable[[Any], bool], str]] = {
    ("seed",): (_nonneg, "must be >= 0"),
    ("dataset", "source"): (lambda v: v in ("simulate", "ingest"), "must be 'simulate' or 'ingest'"),
    ("dataset", "length"): (lambda v: v >= 2, "must be >= 2"),
    ("dataset", "holdout_fraction"): (_unit_open, "must lie in (0, 1)"),
    ("dataset", "simulate", "n_towns"): (lambda v: v >= 2, "must be >= 2"),
    ("dataset", "simulate", "world"): (_positive, "must be > 0"),
    ("dataset", "simulate", "town_radius"): (_positive, "must be > 0"),
    ("dataset", "simulate", "ring"): (_unit_open, "must lie in (0, 1)"),
    ("dataset", "simulate", "population"): (lambda v: v >= 4, "must be >= 4"),
    ("dataset", "simulate", "traveler_fraction"): (lambda v: 0.0 <= v <= 1.0, "must lie in [0, 1]"),
    ("dataset", "ingest", "window_minutes"): (_positive, "must be > 0"),
    ("dataset", "ingest", "bbox"): (
        lambda v: len(v) == 4 and v[2] > v[0] and v[3] > v[1],
        "must be [min_lon, min_lat, max_lon, max_lat] with max > min",
    ),
    ("vae", "latent_dim"): (_positive, "must be >= 1"),
    ("vae", "channels"): (lambda v: len(v) > 0 and all(c > 0 for c in v), "must be a non-empty list of positive ints"),
    ("vae", "lambda_rec"): (_positive, "must be > 0"),
    ("vae", "kl_weight"): (_positive, "must be > 0"),
    ("vae", "learning_rate"): (_positive, "must be > 0"),
    ("vae", "epochs"): (_positive, "must be >= 1"),
    ("vae", "batch_size"): (_positive, "must be >= 1"),
    ("segmentation", "depth"): (lambda v: 0 <= v <= 24, "must lie in [0, 24]"),
    ("diffusion", "widths"): (lambda v: len(v) > 0 and all(c > 0 for c in v), "must be a non-empty list of positive ints"),
    ("diffusion", "time_dim"): (lambda v: v > 0 and v % 2 == 0, "must be a positive even int"),
    ("diffusion", "emb_dim"): (_positive, "must be >= 1"),
    ("diffusion", "T"): (_positive, "must be >= 1"),
    ("diffusion", "schedule"): (lambda v: v in ("cosine", "linear"), "must be 'cosine' or 'linear'"),
    ("diffusion", "beta_range"): (lambda v: len(v) == 2 and 0 < v[0] < v[1] < 1, "must be [lo, hi] with 0 < lo < hi < 1"),
    ("diffusion", "learning_rate"): (_positive, "must be > 0"),
    ("diffusion", "lr_schedule"): (lambda v: v in ("constant", "cosine"), "must be 'constant' or 'cosine'"),
    ("diffusion", "batch_size"): (_positive, "must be >= 1"),
    ("diffusion", "epochs"): (_positive, "must be >= 1"),
    ("diffusion", "cond_dropout"): (_unit_half_open, "must lie in [0, 1)"),
    ("diffusion", "ema_decay"): (_unit_half_open, "must lie in [0, 1)"),
    ("diffusion", "grad_clip"): (_nonneg, "must be >= 0"),
    ("guidance", "scales"): (lambda v: len(v) > 0 and all(s >= 0 for s in v), "must be a non-empty list of scales >= 0"),
    ("guidance", "sampler"): (lambda v: v in ("ddpm", "ddim"), "must be 'ddpm' or 'ddim'"),
    ("generation", "n_samples"): (_positive, "must be >= 1"),
    ("privacy", "ratio_threshold"): (_unit_open, "must lie in (0, 1)"),
    ("privacy", "upsampling_factors"): (lambda v: len(v) > 0 and all(b > 0 for b in v), "must be a non-empty list of positive factors"),
    ("privacy", "repeats"): (_positive, "must be >= 1"),
    ("privacy", "i"): (lambda v: v >= 1, "must be >= 1"),
    ("privacy", "max_conditions"): (_positive, "must be >= 1"),
    ("privacy", "lipschitz_samples"): (_positive, "must be >= 1"),
    ("privacy", "lipschitz_iters"): (_positive, "must be >= 1"),
    ("privacy", "lipschitz_mode"): (lambda v: v in ("per_step_max", "end_to_end"), "must be 'per_step_max' or 'end_to_end'"),
    ("metrics", "cells_x"): (_positive, "must be >= 1"),
    ("metrics", "cells_y"): (_positive, "must be >= 1"),
    ("metrics", "top_n"): (_positive, "must be >= 1"),
    ("metrics", "threshold"): (_positive, "must be > 0"),
    ("metrics", "horizon"): (_positive, "must be >= 1"),
    ("metrics", "n_runs"): (_positive, "must be >= 1"),
    ("metrics", "n_samples"): (_positive, "must be >= 1"),
    ("metrics", "step_seconds"): (_positive, "must be > 0"),
    ("metrics", "meters_per_unit"): (_positive, "must be > 0"),
}


class ConfigError(ValueError):
    """Invalid pipeline configuration; ``errors`` lists every violated key."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {e}" for e in self.errors))


def _type_ok(value, default, optional_type=None) -> tuple[bool, Any]:
    """Check ``value`` against the type of ``default``; ints are accepted for floats."""
    if value is None:
        return default is None, value
    kind = optional_type if default is None else type(default)
    if kind is bool:
        return isinstance(value, bool), value
    if kind is int:
        return isinstance(value, int) and not isinstance(value, bool), value
    if kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return True, float(value)
        return False, value
    if kind is str:
        return isinstance(value, str), value
    if kind is list:
        if not isinstance(value, (list, tuple)):
            return False, value
        if default:
            elem = type(default[0])
            if elem is float:
                ok = all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
                return ok, [float(v) for v in value] if ok else value
            if elem is int:
                return all(isinstance(v, int) and not isinstance(v, bool) for v in value), list(value)
        return True, list(value)
    return True, value


def _merge(defaults: Mapping, raw: Mapping, path: tuple, errors: list[str]) -> dict:
    out = {}
    for key in raw:
        if key not in defaults:
            errors.append(f"{'.'.join(path + (str(key),))}: unknown key")
    for key, default in defaults.items():
        kp = path + (key,)
        name = ".".join(kp)
        if isinstance(default, dict):
            sub = raw.get(key, {})
            if sub is None:
                sub = {}
            if not isinstance(sub, Mapping):
                errors.append(f"{name}: must be a mapping")
                sub = {}
            out[key] = _merge(default, sub, kp, errors)
            continue
        value = raw.get(key, copy.deepcopy(default))
        ok, value = _type_ok(value, default, _OPTIONAL.get(kp))
        if not ok:
            want = (_OPTIONAL.get(kp) or type(default)).__name__
            errors.append(f"{name}: expected {want}{' or null' if kp in _OPTIONAL else ''}, got {value!r}")
            out[key] = copy.deepcopy(default)
            continue
        check = _CHECKS.get(kp)
        if check is not None and value is not None:
            try:
                good = check[0](value)
            except (TypeError, IndexError):
                good = False
            if not good:
                errors.append(f"{name}: {check[1]} (got {value!r})")
        out[key] = value
    return out


@dataclass(frozen=True)
class PipelineConfig:
    """Validated, fully populated pipeline configuration.

    ``data`` is the nested mapping with every default filled in; typed views
    for each module are exposed as methods.
    """

    data: dict
    source_path: str | None = None

    @classmethod
    def from_dict(cls, raw: Mapping | None, source_path: str | None = None, base_dir=None) -> "PipelineConfig":
        raw = raw or {}
        if not isinstance(raw, Mapping):
            raise ConfigError(["<root>: configuration must be a mapping"])
        errors: list[str] = []
        data = _merge(DEFAULTS, raw, (), errors)
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        ds = data["dataset"]
        if ds["source"] == "ingest":
            paths = ds["ingest"]["paths"]
            if not paths:
                errors.append("dataset.ingest.paths: required when dataset.source is 'ingest'")
            resolved = []
            for p in paths:
                q = Path(p) if Path(p).is_absolute() else base / p
                if not q.exists():
                    errors.append(f"dataset.ingest.paths: {p} does not exist")
                resolved.append(str(q))
            ds["ingest"]["paths"] = resolved
            if ds["ingest"]["bbox"] is None:
                errors.append("dataset.ingest.bbox: required when dataset.source is 'ingest'")
        else:
            sim = ds["simulate"]
            if ds["holdout_fraction"] * sim["population"] < 1:
                errors.append("dataset.holdout_fraction: leaves no held-out trajectories")
        widths = data["diffusion"]["widths"]
        if widths and ds["length"] % (2 ** (len(widths) - 1)):
            errors.append(f"dataset.length: must be divisible by {2 ** (len(widths) - 1)} for {len(widths)} U-Net levels")
        channels = data["vae"]["channels"]
        if channels and ds["length"] % (2 ** len(channels)):
            errors.append(f"dataset.length: must be divisible by {2 ** len(channels)} for {len(channels)} VAE blocks")
        if errors:
            raise ConfigError(errors)
        return cls(data, source_path)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"<file>: {path} does not exist"])
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError([f"<file>: {path} is not valid YAML ({exc})"]) from exc
        return cls.from_dict(raw, str(path), path.parent)

    # ------------------------------------------------------------------

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def length(self) -> int:
        return int(self.data["dataset"]["length"])

    def output_dir(self) -> Path:
        """Output directory, overridden by the ``TRAJSYNTH_OUTPUT_DIR`` environment variable."""
        env = os.environ.get(OUTPUT_ENV)
        if env:
            return Path(env)
        out = Path(self.data["output_dir"])
        if not out.is_absolute() and self.source_path is not None:
            out = Path(self.source_path).parent / out
        return out

    def section_hash(self, *sections: str) -> str:
        """Stable hash of the named sections (plus the global seed and length)."""
        payload = {s: self.data[s] for s in sections}
        payload["seed"] = self.seed
        payload["length"] = self.length
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def hash(self) -> str:
        blob = json.dumps({k: v for k, v in self.data.items() if k != "output_dir"}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    # typed views -------------------------------------------------------

    def world_spec(self) -> WorldSpec:
        sim = self.data["dataset"]["simulate"]
        return WorldSpec(
            towns=ring_towns(sim["n_towns"], sim["world"], sim["town_radius"], sim["ring"]),
            population=sim["population"],
            traveler_fraction=sim["traveler_fraction"],
            seed=self.seed,
            points_per_trajectory=self.length,
        )

    def vae_config(self) -> VaeConfig:
        return VaeConfig(**self.data["vae"], seed=self.seed)

    def diffusion_config(self) -> DiffusionConfig:
        return DiffusionConfig(**self.data["diffusion"], seed=self.seed)

    def guidance(self, scale: float | None = None) -> GuidanceConfig:
        s = self.data["guidance"]["scales"][0] if scale is None else scale
        return GuidanceConfig(float(s), self.data["diffusion"]["cond_dropout"])

    def memorization_test(self) -> MemorizationTest:
        p = self.data["privacy"]
        return MemorizationTest(p["ratio_threshold"], tuple(p["upsampling_factors"]), p["repeats"])

    def metric_settings(self) -> MetricSettings:
        m = self.data["metrics"]
        return MetricSettings(
            Grid(cells_x=m["cells_x"], cells_y=m["cells_y"]),
            m["top_n"], m["threshold"], m["horizon"], m["step_seconds"], m["meters_per_unit"],
        )

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)
