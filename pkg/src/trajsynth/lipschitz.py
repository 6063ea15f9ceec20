"""Spectral-norm estimation through Jacobian-vector products.

Power iteration needs only two callbacks, ``v -> J v`` and ``u -> J^T u``,
so the same routine serves explicit matrices, convolution layers and the
Jacobian of the trained noise predictor. The latter uses central finite
differences for the forward product and autograd for the adjoint.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn

from .diffusion.model import DenoiserModel, GuidanceConfig, predict_noise, reverse_mean
from .segmentation import LatentCell, condition_vector

MODES = ("per_step_max", "end_to_end")


class AdjointMismatchError(RuntimeError):
    """The forward and adjoint callbacks do not describe the same operator."""


class NonFiniteProbeError(RuntimeError):
    pass


@dataclass(frozen=True)
class JacobianOracle:
    """Matrix-free access to a linear operator ``J`` of shape ``(output_dim, input_dim)``."""

    forward_product: Callable[[np.ndarray], np.ndarray]
    adjoint_product: Callable[[np.ndarray], np.ndarray]
    input_dim: int
    output_dim: int

    @classmethod
    def from_matrix(cls, matrix) -> "JacobianOracle":
        a = np.asarray(matrix, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError("matrix must be 2-D")
        return cls(lambda v: a @ v, lambda u: a.T @ u, a.shape[1], a.shape[0])

    def adjoint_error(self, n_probes: int = 3, seed: int = 0) -> float:
        """Largest relative gap between ``<J v, u>`` and ``<v, J^T u>`` over random probes."""
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_probes):
            v = rng.standard_normal(self.input_dim)
            u = rng.standard_normal(self.output_dim)
            jv = np.asarray(self.forward_product(v), dtype=np.float64)
            jtu = np.asarray(self.adjoint_product(u), dtype=np.float64)
            lhs, rhs = float(jv @ u), float(v @ jtu)
            scale = np.linalg.norm(jv) * np.linalg.norm(u) + np.linalg.norm(v) * np.linalg.norm(jtu)
            if scale == 0.0:
                continue
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst

    def check_adjoint(self, rtol: float = 1e-6, n_probes: int = 3, seed: int = 0) -> float:
        err = self.adjoint_error(n_probes, seed)
        if not err <= rtol:
            raise AdjointMismatchError(f"adjoint inconsistency {err:.3e} exceeds {rtol:.1e}")
        return err


def _power_once(oracle: JacobianOracle, n_iters: int, max_iters: int, tol: float, rng: np.random.Generator,
                history: list | None):
    v = rng.standard_normal(oracle.input_dim)
    v /= np.linalg.norm(v)
    prev = est = float(np.linalg.norm(oracle.forward_product(v)))
    if history is not None:
        history.append(est)
    for k in range(1, max_iters + 1):
        w = oracle.adjoint_product(oracle.forward_product(v))
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0, 0.0
        v = w / nrm
        prev, est = est, float(np.linalg.norm(oracle.forward_product(v)))
        if history is not None:
            history.append(est)
        if k >= n_iters and abs(est - prev) <= tol * est:
            break
    return est, prev


def power_iteration(oracle: JacobianOracle, n_iters: int = 100, seed: int = 0, rtol: float = 1e-6,
                    history: list | None = None, max_iters: int | None = None) -> float:
    """Largest singular value of ``J`` by iterating ``v <- J^T J v / ||J^T J v||``.

    Returns ``||J v_k||`` for the final unit vector. At least ``n_iters``
    steps are taken; iteration then continues until one step changes the
    estimate by at most ``1e-3 * rtol`` (relative) or ``max_iters`` steps
    (default ``50 * n_iters``) are done. With a small gap between the two
    largest singular values the error shrinks slowly, so a step change of
    ``rtol`` does not bound the error by ``rtol``. If the budget runs out,
    the iteration is repeated once from a fresh random start and the larger
    estimate is kept; both are lower bounds on the true value. A zero
    operator gives 0.

    Parameters
    ----------
    history
        If given, receives ``||J v_k||`` for every iterate of the first run.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    max_iters = 50 * n_iters if max_iters is None else max(max_iters, n_iters)
    tol = 1e-3 * rtol
    rng = np.random.default_rng(seed)
    est, prev = _power_once(oracle, n_iters, max_iters, tol, rng, history)
    if est > 0.0 and abs(est - prev) > tol * est:
        retry, _ = _power_once(oracle, n_iters, max_iters, tol, rng, None)
        est = max(est, retry)
    return est


def batched_power_iteration(forward: Callable, adjoint: Callable, shape: tuple, n_iters: int = 100,
                            seed: int = 0) -> np.ndarray:
    """Independent power iterations for a batch of block-diagonal operators.

    ``forward`` and ``adjoint`` map ``(B, *shape)`` arrays to ``(B, *shape_out)``
    and back, acting separately on each batch row. Returns the ``B``
    estimates ``||J_b v_b||``.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    axes = tuple(range(1, v.ndim))

    def unit(a):
        n = np.sqrt(np.sum(a * a, axis=axes, keepdims=True))
        return np.divide(a, n, out=np.zeros_like(a), where=n > 0)

    v = unit(v)
    for _ in range(n_iters):
        v = unit(adjoint(forward(v)))
    jv = forward(v)
    return np.sqrt(np.sum(jv * jv, axis=tuple(range(1, jv.ndim))))


# --------------------------------------------------------------------------
# Monte-Carlo estimate for the conditional denoiser


@dataclass
class LipschitzEstimate:
    cell_id: int
    L_value: float
    samples_used: int
    sigma_max: np.ndarray
    mode: str = "per_step_max"
    timesteps: np.ndarray | None = None
    adjoint_error: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.sigma_max))

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "L_value": self.L_value,
            "L_mean": self.mean,
            "samples_used": self.samples_used,
            "mode": self.mode,
            "adjoint_error": self.adjoint_error,
        }


def _float64_copy(model: DenoiserModel, use_ema: bool) -> DenoiserModel:
    net = copy.deepcopy(model.inference_net(use_ema)).double().eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return DenoiserModel(net, net, model.config, model.schedule, model.length, model.cond_dim)


def _condition(cell) -> tuple[int, np.ndarray]:
    if isinstance(cell, LatentCell):
        return cell.cell_id, condition_vector(cell)
    return -1, np.asarray(cell, dtype=np.float64)


def _jacobian_callbacks(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, fd_step: float):
    """Forward products by central differences and adjoint products by autograd for ``fn`` at ``x``.

    ``fn`` acts row-wise on a batch; the step for row ``b`` is
    ``fd_step * (1 + ||x_b||)`` along the unit direction. The fourth-order
    stencil ``(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`` keeps the
    truncation error far below the adjoint-consistency tolerance; the
    two-point rule does not on small GroupNorm layers.
    """
    axes = tuple(range(1, x.ndim))
    h = fd_step * (1.0 + torch.sqrt(torch.sum(x * x, dim=axes, keepdim=True)))
    xg = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        y = fn(xg)

    def forward(v):
        v = torch.as_tensor(v, dtype=x.dtype)
        nv = torch.sqrt(torch.sum(v * v, dim=axes, keepdim=True))
        d = torch.where(nv > 0, v / torch.where(nv > 0, nv, torch.ones_like(nv)), torch.zeros_like(v))
        with torch.no_grad():
            d1 = fn(x + h * d) - fn(x - h * d)
            d2 = fn(x + 2.0 * h * d) - fn(x - 2.0 * h * d)
            jv = (8.0 * d1 - d2) / (12.0 * h)
        out = (jv * nv).numpy()
        if not np.all(np.isfinite(out)):
            raise NonFiniteProbeError("non-finite forward product")
        return out

    def adjoint(u):
        u = torch.as_tensor(u, dtype=x.dtype)
        (g,) = torch.autograd.grad(y, xg, grad_outputs=u, retain_graph=True)
        out = g.numpy()
        if not np.all(np.isfinite(out)):
            raise NonFiniteProbeError("non-finite adjoint product")
        return out

    return forward, adjoint


def _ddim_map(model: DenoiserModel, cond, guidance: GuidanceConfig) -> Callable:
    def run(x):
        for t in range(model.schedule.T, 0, -1):
            eps = predict_noise(model, x, t, cond, guidance)
            x = reverse_mean(model.schedule, x, eps, t)
        return x

    return run


def local_lipschitz_condition(model: DenoiserModel, cell, guidance: GuidanceConfig = GuidanceConfig(),
                              n_samples: int = 300, seed: int = 0, mode: str = "per_step_max",
                              n_iters: int = 100, fd_step: float = 1e-5, batch_size: int = 100,
                              use_ema: bool = True, adjoint_rtol: float = 1e-6) -> LipschitzEstimate:
    """Monte-Carlo Lipschitz constant of the guided generator for one condition.

    ``per_step_max`` draws ``x ~ N(0, I)`` and ``t ~ U{1..T}`` and estimates
    ``sigma_max`` of the Jacobian of ``x -> eps(x, t, c)`` by power iteration;
    the constant is the maximum over samples (the mean is reported too).
    ``end_to_end`` does the same for the deterministic DDIM map from initial
    noise to output. Computations run on a float64 copy of the network.
    Before use, the adjoint-consistency probe runs on every sample's oracle.

    ``cell`` is a :class:`LatentCell` or a raw condition vector.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    cell_id, cond = _condition(cell)
    m64 = _float64_copy(model, use_ema)
    rng = np.random.default_rng(seed)
    shape = (2, model.length)
    xs = rng.standard_normal((n_samples,) + shape)
    ts = rng.integers(1, model.schedule.T + 1, size=n_samples)
    sig = np.empty(n_samples)
    worst = 0.0
    for s in range(0, n_samples, batch_size):
        x = torch.as_tensor(xs[s : s + batch_size])
        if mode == "per_step_max":
            t = torch.as_tensor(ts[s : s + batch_size])
            fn = lambda z, t=t: predict_noise(m64, z, t, cond, guidance)  # noqa: E731
        else:
            fn = _ddim_map(m64, cond, guidance)
        fwd, adj = _jacobian_callbacks(fn, x, fd_step)
        worst = max(worst, _batch_adjoint_error(fwd, adj, x.shape, seed + s, adjoint_rtol))
        sig[s : s + x.shape[0]] = batched_power_iteration(fwd, adj, x.shape, n_iters, seed + s)
    return LipschitzEstimate(cell_id, float(sig.max()), n_samples, sig, mode,
                             ts if mode == "per_step_max" else None, worst)


def _batch_adjoint_error(fwd, adj, shape, seed: int, rtol: float) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(shape)
    u = rng.standard_normal(shape)
    jv, jtu = fwd(v), adj(u)
    axes = tuple(range(1, len(shape)))
    lhs = np.sum(jv * u, axis=axes)
    rhs = np.sum(v * jtu, axis=axes)
    scale = (np.linalg.norm(jv.reshape(shape[0], -1), axis=1) * np.linalg.norm(u.reshape(shape[0], -1), axis=1)
             + np.linalg.norm(v.reshape(shape[0], -1), axis=1) * np.linalg.norm(jtu.reshape(shape[0], -1), axis=1))
    err = float(np.max(np.abs(lhs - rhs) / np.where(scale > 0, scale, 1.0)))
    if not err <= rtol:
        raise AdjointMismatchError(f"adjoint inconsistency {err:.3e} exceeds {rtol:.1e}")
    return err


# --------------------------------------------------------------------------
# decoder bound


_UNIT_LIPSCHITZ = (nn.ReLU, nn.Hardtanh, nn.Identity, nn.Unflatten, nn.Flatten)


def _linear_part_oracle(layer: nn.Module, in_shape: tuple) -> JacobianOracle:
    """Oracle for ``v -> layer(v) - layer(0)`` at the given (unbatched) input shape."""
    layer = copy.deepcopy(layer).double()
    zero = torch.zeros((1,) + in_shape, dtype=torch.float64)
    with torch.no_grad():
        offset = layer(zero)
    out_shape = tuple(offset.shape[1:])
    n_in, n_out = math.prod(in_shape), math.prod(out_shape)

    def forward(v):
        with torch.no_grad():
            return (layer(torch.as_tensor(v).reshape((1,) + in_shape)) - offset).reshape(-1).numpy()

    def adjoint(u):
        z = zero.clone().requires_grad_(True)
        y = layer(z)
        (g,) = torch.autograd.grad(y, z, grad_outputs=torch.as_tensor(u).reshape(y.shape))
        return g.reshape(-1).numpy()

    return JacobianOracle(forward, adjoint, n_in, n_out)


def layer_norms(decoder: nn.Sequential, latent_dim: int, n_iters: int = 300, seed: int = 0) -> list[tuple[str, float]]:
    """Per-layer Lipschitz constants of an affine/ReLU/clip decoder.

    Affine layers (linear, convolution, nearest upsampling) get the spectral
    norm of their linear part by power iteration; activations and reshapes
    contribute 1. Any other layer type is rejected.
    """
    shape = (latent_dim,)
    out = []
    x = torch.zeros((1,) + shape, dtype=torch.float64)
    for k, layer in enumerate(decoder):
        name = type(layer).__name__
        if isinstance(layer, _UNIT_LIPSCHITZ):
            if isinstance(layer, nn.Hardtanh) and (layer.min_val > layer.max_val):
                raise ValueError("invalid Hardtanh bounds")
            norm = 1.0
        elif isinstance(layer, (nn.Linear, nn.Conv1d, nn.Upsample)):
            norm = power_iteration(_linear_part_oracle(layer, shape), n_iters, seed + k)
        else:
            raise TypeError(f"layer {k} ({name}) is not affine, ReLU or a clip")
        out.append((name, norm))
        with torch.no_grad():
            x = copy.deepcopy(layer).double()(x)
        shape = tuple(x.shape[1:])
    return out


def layer_product_bound(decoder: nn.Sequential, latent_dim: int, **kw) -> float:
    return float(np.prod([n for _, n in layer_norms(decoder, latent_dim, **kw)]))


@dataclass
class DecoderBoundReport:
    cell_id: int
    diagonal: float
    L_layer_product: float
    L_sampled: float
    bound: float
    max_distance: float
    violations: int
    n_probe: int
    layers: list = field(default_factory=list)

    @property
    def max_ratio(self) -> float:
        """Largest observed distance as a fraction of the bound."""
        return self.max_distance / self.bound if self.bound > 0 else 0.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "cell_id", "diagonal", "L_layer_product", "L_sampled", "bound", "max_distance", "violations", "n_probe")}
        d["max_ratio"] = self.max_ratio
        return d


def check_decoder_ball_bound(vae, cell: LatentCell, n_probe: int = 1000, seed: int = 0, n_pairs: int = 1000,
                             L_layer_product: float | None = None, rtol: float = 1e-9) -> DecoderBoundReport:
    """Check that decoded points of a latent cell stay in ``B(f(z_c), L d / 2)``.

    ``L`` is the product of per-layer norms (an upper bound on the decoder's
    Lipschitz constant); the largest sampled ratio
    ``||f(z) - f(z')|| / ||z - z'||`` over random pairs in the cell is
    reported alongside as a lower estimate. Distances are Euclidean over the
    flattened ``(L, 2)`` output.
    """
    lo, hi = np.asarray(cell.lower, dtype=np.float64), np.asarray(cell.upper, dtype=np.float64)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise ValueError("cell must be bounded (clip it to the data box first)")
    layers = layer_norms(vae.decoder, vae.latent_dim, seed=seed) if L_layer_product is None else []
    L = float(np.prod([n for _, n in layers])) if L_layer_product is None else float(L_layer_product)
    d = cell.diagonal
    rng = np.random.default_rng(seed)
    zc = 0.5 * (lo + hi)
    fc = vae.decode_batch(zc[None])[0].reshape(-1)
    z = rng.uniform(lo, hi, size=(n_probe, lo.size))
    fz = vae.decode_batch(z).reshape(n_probe, -1)
    dist = np.linalg.norm(fz - fc, axis=1)
    bound = L * d / 2.0
    violations = int(np.sum(dist > bound * (1.0 + rtol)))
    za = rng.uniform(lo, hi, size=(n_pairs, lo.size))
    zb = rng.uniform(lo, hi, size=(n_pairs, lo.size))
    num = np.linalg.norm(vae.decode_batch(za).reshape(n_pairs, -1) - vae.decode_batch(zb).reshape(n_pairs, -1), axis=1)
    den = np.linalg.norm(za - zb, axis=1)
    ratio = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return DecoderBoundReport(cell.cell_id, d, L, float(ratio.max(initial=0.0)), bound, float(dist.max(initial=0.0)),
                              violations, n_probe, layers)
