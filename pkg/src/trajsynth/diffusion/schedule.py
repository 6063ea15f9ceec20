"""Noise schedules and the closed-form forward process."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; entry ``k`` corresponds to timestep ``t = k + 1``."""

    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_range: tuple[float, float] = (1e-4, 0.02)

    def at(self, t: int) -> tuple[float, float, float]:
        """``(beta_t, alpha_t, alpha_bar_t)`` for ``1 <= t <= T``."""
        self._check(t)
        k = t - 1
        return float(self.beta[k]), float(self.alpha[k]), float(self.alpha_bar[k])

    def _check(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_range": list(self.beta_range)}


def build_schedule(kind: str = "cosine", T: int = 500, beta_range=(1e-4, 0.02)) -> NoiseSchedule:
    """Linear or cosine variance schedule.

    The cosine schedule ignores ``beta_range``: it sets
    ``alpha_bar(t) = f(t) / f(0)`` with ``f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)``,
    ``s = 0.008``, derives ``beta_t = 1 - alpha_bar_t / alpha_bar_{t-1}`` and
    clips it to 0.999.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    lo, hi = (float(v) for v in beta_range)
    if kind == "linear":
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"invalid beta_range {beta_range}: need 0 < lo <= hi < 1")
        beta = np.linspace(lo, hi, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2.0) ** 2
        abar = f / f[0]
        beta = np.clip(1.0 - abar[1:] / abar[:-1], 0.0, MAX_BETA)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, kind, beta, alpha, alpha_bar, (lo, hi))


def forward_noise(schedule: NoiseSchedule, x0, t, epsilon) -> np.ndarray:
    """``x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`` (numpy)."""
    schedule._check(t)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(epsilon, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"epsilon shape {eps.shape} differs from x0 shape {x0.shape}")
    abar = schedule.alpha_bar[np.asarray(t) - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps
