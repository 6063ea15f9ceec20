"""Central finite-difference gradient checks on float64 modules."""

from __future__ import annotations

import numpy as np
import torch


def directional_errors(loss_fn, params, n_dirs: int = 10, h: float = 1e-6, seed: int = 0) -> np.ndarray:
    """Relative error between autograd and central differences along random directions.

    ``loss_fn()`` evaluates the scalar loss with the current parameter values.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    gen = torch.Generator().manual_seed(seed)
    errs = []
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
        analytic = sum((g * d).sum() for g, d in zip(grads, dirs)).item()
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(h * d)
            plus = loss_fn().item()
            for p, d in zip(params, dirs):
                p.sub_(2 * h * d)
            minus = loss_fn().item()
            for p, d in zip(params, dirs):
                p.add_(h * d)
        numeric = (plus - minus) / (2 * h)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    return np.array(errs)


def coordinate_errors(loss_fn, params, n_coords: int = 30, h: float = 1e-6, seed: int = 0) -> np.ndarray:
    """Per-coordinate check, error relative to the largest gradient entry."""
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    scale = max(float(g.abs().max()) for g in grads)
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n_coords):
        k = int(rng.integers(len(params)))
        p, g = params[k], grads[k]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            plus = loss_fn().item()
            p[idx] = old - h
            minus = loss_fn().item()
            p[idx] = old
        errs.append(abs(g[idx].item() - (plus - minus) / (2 * h)) / max(scale, 1e-12))
    return np.array(errs)
