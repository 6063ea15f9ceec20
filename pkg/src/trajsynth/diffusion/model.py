"""Conditional denoiser training (with classifier-free dropout and EMA) and sampling."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from ..checkpoint import load_checkpoint, save_checkpoint
from ..core import Dataset, Source
from .schedule import NoiseSchedule, build_schedule
from .unet import UNet1d

log = logging.getLogger(__name__)

SAMPLERS = ("ddpm", "ddim")


class NumericalError(RuntimeError):
    pass


@dataclass
class DiffusionConfig:
    widths: tuple[int, ...] = (32, 64, 128, 128)
    time_dim: int = 64
    emb_dim: int = 128
    attention: bool = True
    T: int = 500
    schedule: str = "cosine"
    beta_range: tuple[float, float] = (1e-4, 0.02)
    learning_rate: float = 2e-4
    lr_schedule: str = "constant"
    batch_size: int = 256
    epochs: int = 100
    cond_dropout: float = 0.1
    ema_decay: float = 0.9999
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.beta_range = tuple(float(b) for b in self.beta_range)
        errors = []
        if not self.widths:
            errors.append("widths must be non-empty")
        if not 0.0 <= self.cond_dropout < 1.0:
            errors.append("cond_dropout must lie in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            errors.append("ema_decay must lie in [0, 1)")
        if self.schedule not in ("cosine", "linear"):
            errors.append(f"unknown schedule {self.schedule!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            errors.append(f"unknown lr_schedule {self.lr_schedule!r}")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["beta_range"] = list(self.beta_range)
        return d


@dataclass(frozen=True)
class GuidanceConfig:
    scale: float = 1.0
    cond_dropout: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must lie in [0, 1)")


@dataclass
class DenoiserModel:
    """Raw and EMA copies of the U-Net plus the schedule they were trained with."""

    net: UNet1d
    ema: UNet1d
    config: DiffusionConfig
    schedule: NoiseSchedule
    length: int
    cond_dim: int
    loss_log: list = field(default_factory=list)
    steps: int = 0

    def inference_net(self, use_ema: bool = True) -> UNet1d:
        return self.ema if use_ema else self.net

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype


def build_denoiser(length: int, cond_dim: int, config: DiffusionConfig, dtype=torch.float32) -> DenoiserModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        net = UNet1d(cond_dim, config.widths, config.time_dim, config.emb_dim, config.attention)
    if length % net.min_length_multiple:
        raise ValueError(f"length {length} must be divisible by {net.min_length_multiple}")
    net = net.to(dtype)
    ema = copy.deepcopy(net)
    for p in ema.parameters():
        p.requires_grad_(False)
    schedule = build_schedule(config.schedule, config.T, config.beta_range)
    return DenoiserModel(net, ema, config, schedule, length, cond_dim)


@torch.no_grad()
def ema_update(ema: torch.nn.Module, net: torch.nn.Module, decay: float) -> None:
    """``ema <- decay * ema + (1 - decay) * param`` for every parameter."""
    for e, p in zip(ema.parameters(), net.parameters()):
        e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def diffusion_loss(net, x0, t, eps, cond, alpha_bar: torch.Tensor) -> torch.Tensor:
    """MSE between ``eps`` and the prediction at ``x_t``; ``t`` is 1-based."""
    ab = alpha_bar[t - 1].to(x0.dtype)[:, None, None]
    xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps
    return F.mse_loss(net(xt, t, cond), eps)


def _to_tensor(points, dtype) -> torch.Tensor:
    return torch.as_tensor(np.array(points, dtype=np.float64), dtype=dtype).transpose(1, 2).contiguous()


def train_diffusion(points, conditions, config: DiffusionConfig, schedule: NoiseSchedule | None = None,
                    log_every: int = 0) -> DenoiserModel:
    """Train the conditional noise predictor.

    ``points`` is an ``(N, L, 2)`` normalized array (or a :class:`Dataset`),
    ``conditions`` the matching ``(N, 2n)`` condition vectors. Each step draws
    ``t ~ U{1..T}`` and ``eps ~ N(0, I)``, replaces a ``cond_dropout`` share of
    conditions with the all-zero null condition, and takes an Adam step on
    the noise MSE followed by an EMA update.
    """
    if isinstance(points, Dataset):
        points = points.points
    points = np.asarray(points)
    conditions = np.asarray(conditions, dtype=np.float64)
    if points.shape[0] != conditions.shape[0]:
        raise ValueError("every trajectory needs a condition vector")
    model = build_denoiser(points.shape[1], conditions.shape[1], config)
    if schedule is not None:
        model.schedule = schedule
    data = _to_tensor(points, model.dtype)
    cond = torch.as_tensor(conditions, dtype=model.dtype)
    alpha_bar = torch.as_tensor(np.array(model.schedule.alpha_bar))
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.net.parameters(), lr=config.learning_rate)
    n = data.shape[0]
    bs = min(config.batch_size, n)
    T = model.schedule.T
    # cosine decay of the learning rate to zero over all steps
    sched = None
    if config.lr_schedule == "cosine":
        total_steps = config.epochs * -(-n // bs)
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=total_steps)
    model.net.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for s in range(0, n, bs):
            idx = perm[s : s + bs]
            x0 = data[idx]
            c = cond[idx]
            t = torch.randint(1, T + 1, (x0.shape[0],), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            drop = torch.rand(x0.shape[0], generator=gen) < config.cond_dropout
            c = torch.where(drop[:, None], torch.zeros_like(c), c)
            loss = diffusion_loss(model.net, x0, t, eps, c, alpha_bar)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite diffusion loss at step {model.steps}")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.net.parameters(), config.grad_clip)
            opt.step()
            if sched is not None:
                sched.step()
            ema_update(model.ema, model.net, config.ema_decay)
            model.steps += 1
            total += loss.item() * x0.shape[0]
            count += x0.shape[0]
        model.loss_log.append(total / count)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("diffusion epoch %d loss %.5f", epoch, model.loss_log[-1])
    model.net.eval()
    model.ema.eval()
    return model


# --------------------------------------------------------------------------
# inference


def _cond_batch(condition, n: int, dtype) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(condition, dtype=np.float64), dtype=dtype)
    if c.ndim == 1:
        c = c[None].expand(n, -1)
    return c


def predict_noise(model: DenoiserModel, x_t: torch.Tensor, t, condition, guidance: GuidanceConfig,
                  use_ema: bool = True) -> torch.Tensor:
    """Guided noise estimate ``eps_u + s * (eps_c - eps_u)``.

    ``eps_u`` uses the all-zero null condition. Evaluated as ``torch.lerp``
    so that ``s = 0`` and ``s = 1`` return the unconditional and conditional
    predictions bit for bit.
    """
    net = model.inference_net(use_ema)
    if x_t.ndim != 3 or x_t.shape[1:] != (2, model.length):
        raise ValueError(f"x_t must have shape (B, 2, {model.length}), got {tuple(x_t.shape)}")
    n = x_t.shape[0]
    t = torch.as_tensor(t)
    if t.ndim == 0:
        t = t.expand(n)
    c = _cond_batch(condition, n, x_t.dtype)
    if c.shape != (n, model.cond_dim):
        raise ValueError(f"condition must have {model.cond_dim} entries, got {tuple(c.shape)}")
    s = float(guidance.scale)
    if s == 0.0:
        return net(x_t, t, torch.zeros_like(c))
    eps_c = net(x_t, t, c)
    if s == 1.0:
        return eps_c
    eps_u = net(x_t, t, torch.zeros_like(c))
    return torch.lerp(eps_u, eps_c, s)


def _sigmas(schedule: NoiseSchedule, sampler: str) -> np.ndarray:
    if sampler == "ddpm":
        return np.sqrt(schedule.beta)
    if sampler == "ddim":
        return np.zeros(schedule.T)
    raise ValueError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def reverse_mean(schedule: NoiseSchedule, x: torch.Tensor, eps: torch.Tensor, t: int,
                 clip_denoised: bool = True) -> torch.Tensor:
    """Mean of ``x_{t-1}`` given ``x_t`` and the noise estimate (see :func:`sample`)."""
    beta, alpha, abar = schedule.at(t)
    if not clip_denoised:
        return (x - (beta / math.sqrt(1.0 - abar)) * eps) / math.sqrt(alpha)
    abar_prev = float(schedule.alpha_bar[t - 2]) if t > 1 else 1.0
    x0 = ((x - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)).clamp(-1.0, 1.0)
    return (math.sqrt(abar_prev) * beta / (1.0 - abar)) * x0 + (
        math.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)
    ) * x


@torch.inference_mode()
def sample(model: DenoiserModel, condition, guidance: GuidanceConfig, sampler: str = "ddpm", seed: int = 0,
           n: int = 1, x_T=None, sigmas=None, use_ema: bool = True, batch_size: int = 4096,
           clip_denoised: bool = True) -> np.ndarray:
    """Reverse diffusion from ``x_T ~ N(0, I)``; returns ``(n, L, 2)`` clipped to ``[-1, 1]``.

    Update: ``x_{t-1} = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_t) + sigma_t z``
    with ``sigma_t = sqrt(beta_t)`` (ddpm, no noise at ``t = 1``) or 0 (ddim).
    ``sigmas`` overrides the per-step noise scale (index ``t - 1``).

    With ``clip_denoised`` the same mean is computed in its equivalent
    posterior form, ``c0 * x0_hat + c1 * x_t`` with the implied clean estimate
    ``x0_hat`` clipped to ``[-1, 1]``. Near ``t = T`` the cosine schedule has
    ``alpha_t`` close to 0 and the direct form amplifies prediction error by
    ``1 / sqrt(alpha_t)``; the clip bounds it.
    """
    sched = model.schedule
    sig = _sigmas(sched, sampler) if sigmas is None else np.asarray(sigmas, dtype=np.float64)
    gen = torch.Generator().manual_seed(int(seed))
    dtype = model.dtype
    outs = []
    cond = np.asarray(condition, dtype=np.float64)
    for start in range(0, n, batch_size):
        m = min(batch_size, n - start)
        if x_T is not None:
            x = torch.as_tensor(np.asarray(x_T, dtype=np.float64)[start : start + m], dtype=dtype)
        else:
            x = torch.randn((m, 2, model.length), generator=gen, dtype=dtype)
        c = cond if cond.ndim == 1 else cond[start : start + m]
        for t in range(sched.T, 0, -1):
            eps = predict_noise(model, x, t, c, guidance, use_ema)
            x = reverse_mean(sched, x, eps, t, clip_denoised)
            if t > 1 and sig[t - 1] != 0.0:
                x = x + float(sig[t - 1]) * torch.randn(x.shape, generator=gen, dtype=dtype)
        outs.append(x.clamp(-1.0, 1.0).transpose(1, 2).double().numpy())
    if not outs:
        return np.empty((0, model.length, 2))
    return np.concatenate(outs)


def generated_count(upsampling: float, members: int) -> int:
    """``max(1, floor(B * |K|))``."""
    return max(1, int(math.floor(upsampling * members + 1e-9)))


def generate_for_condition(model: DenoiserModel, cell, count: int, guidance: GuidanceConfig, seed: int,
                           sampler: str = "ddpm") -> Dataset:
    """``count`` samples for one latent cell, ids tagged ``c<cell_id>-<k>``."""
    from ..segmentation import condition_vector

    if count < 1:
        raise ValueError("count must be >= 1")
    pts = sample(model, condition_vector(cell), guidance, sampler, seed, n=count)
    ids = tuple(f"c{cell.cell_id}-{k}" for k in range(count))
    return Dataset(pts, ids, (Source.SYNTHETIC,) * count)


# --------------------------------------------------------------------------
# persistence


def save_denoiser(model: DenoiserModel, path) -> None:
    tensors = {k: v.detach().cpu().numpy() for k, v in model.net.state_dict().items()}
    tensors.update({"ema." + k: v.detach().cpu().numpy() for k, v in model.ema.state_dict().items()})
    extra = {
        "length": model.length,
        "cond_dim": model.cond_dim,
        "schedule": model.schedule.to_dict(),
        "loss_log": model.loss_log,
        "steps": model.steps,
    }
    save_checkpoint(path, "diffusion", model.config.to_dict(), tensors, extra)


def load_denoiser(path) -> DenoiserModel:
    meta, tensors = load_checkpoint(path, "diffusion")
    config = DiffusionConfig(**meta["config"])
    extra = meta["extra"]
    dtype = torch.float64 if next(iter(tensors.values())).dtype == np.float64 else torch.float32
    model = build_denoiser(int(extra["length"]), int(extra["cond_dim"]), config, dtype)
    sd = extra["schedule"]
    model.schedule = build_schedule(sd["kind"], int(sd["T"]), tuple(sd["beta_range"]))
    model.net.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items() if not k.startswith("ema.")})
    model.ema.load_state_dict({k[4:]: torch.as_tensor(v) for k, v in tensors.items() if k.startswith("ema.")})
    model.loss_log = list(extra.get("loss_log", []))
    model.steps = int(extra.get("steps", 0))
    model.net.eval()
    model.ema.eval()
    return model
