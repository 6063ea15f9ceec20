"""1D convolutional VAE over normalized trajectories.

The decoder is built only from affine layers (linear, convolution, nearest
upsampling) and ReLU, followed by a hard clip to ``[-1, 1]``. Every piece is
Lipschitz with a computable constant, which :mod:`trajsynth.lipschitz` uses
to bound how far decoded trajectories of one latent cell can spread.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Dataset, Source, Trajectory

log = logging.getLogger(__name__)

LOGVAR_CLAMP = 20.0


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class VaeConfig:
    latent_dim: int = 4
    channels: tuple[int, ...] = (16, 32, 64)
    lambda_rec: float = 1.0
    kl_weight: float = 0.1
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        errors = []
        if self.latent_dim < 1:
            errors.append("latent_dim must be >= 1")
        if not self.channels:
            errors.append("channels must be non-empty")
        if self.lambda_rec <= 0 or self.kl_weight <= 0:
            errors.append("lambda_rec and kl_weight must be > 0")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass(frozen=True)
class LatentCode:
    mu: np.ndarray
    log_var: np.ndarray


class _Encoder(nn.Module):
    def __init__(self, length: int, channels, latent_dim: int):
        super().__init__()
        layers, c_in = [], 2
        for c in channels:
            layers += [nn.Conv1d(c_in, c, 3, stride=2, padding=1), nn.ReLU()]
            c_in = c
        self.body = nn.Sequential(*layers, nn.Flatten())
        flat = c_in * (length >> len(channels))
        self.mu = nn.Linear(flat, latent_dim)
        self.log_var = nn.Linear(flat, latent_dim)
        for head in (self.mu, self.log_var):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)

    def forward(self, x):
        h = self.body(x)
        return self.mu(h), self.log_var(h).clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)


def _decoder_layers(length: int, channels, latent_dim: int) -> list[nn.Module]:
    rev = list(reversed(channels))
    base = length >> len(channels)
    layers: list[nn.Module] = [nn.Linear(latent_dim, rev[0] * base), nn.ReLU(), nn.Unflatten(1, (rev[0], base))]
    outs = rev[1:] + [2]
    for k, (c_in, c_out) in enumerate(zip(rev, outs)):
        layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv1d(c_in, c_out, 3, padding=1)]
        if k < len(outs) - 1:
            layers.append(nn.ReLU())
    layers.append(nn.Hardtanh(-1.0, 1.0))
    return layers


class VaeModel(nn.Module):
    """Encoder/decoder pair plus its config and per-epoch loss log."""

    def __init__(self, length: int, config: VaeConfig):
        super().__init__()
        if length % (1 << len(config.channels)):
            raise ValueError(f"length {length} must be divisible by 2**{len(config.channels)}")
        self.length = length
        self.config = config
        self.encoder = _Encoder(length, config.channels, config.latent_dim)
        self.decoder = nn.Sequential(*_decoder_layers(length, config.channels, config.latent_dim))
        self.loss_log: list[float] = []

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def forward_encode(self, x: torch.Tensor):
        """``x``: (B, 2, L) -> (mu, log_var), each (B, n)."""
        return self.encoder(x)

    def forward_decode(self, z: torch.Tensor) -> torch.Tensor:
        """``z``: (B, n) -> (B, 2, L)."""
        return self.decoder(z)

    # numpy-facing helpers -------------------------------------------------

    def _as_input(self, points) -> torch.Tensor:
        arr = np.array(points.points if isinstance(points, Trajectory) else points, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (self.length, 2):
            raise ValueError(f"expected trajectories of shape ({self.length}, 2), got {arr.shape[1:]}")
        dtype = next(self.parameters()).dtype
        return torch.as_tensor(arr, dtype=dtype).transpose(1, 2)

    @torch.no_grad()
    def encode_batch(self, points, batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        x = self._as_input(points)
        mus, lvs = [], []
        for s in range(0, x.shape[0], batch_size):
            mu, lv = self.forward_encode(x[s : s + batch_size])
            mus.append(mu.double().numpy())
            lvs.append(lv.double().numpy())
        if not mus:
            return np.empty((0, self.latent_dim)), np.empty((0, self.latent_dim))
        return np.concatenate(mus), np.concatenate(lvs)

    @torch.no_grad()
    def decode_batch(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[None]
        if z.shape[1] != self.latent_dim:
            raise ValueError(f"latent vectors must have length {self.latent_dim}, got {z.shape[1]}")
        dtype = next(self.parameters()).dtype
        out = self.forward_decode(torch.as_tensor(z, dtype=dtype))
        return out.transpose(1, 2).double().numpy()

    def state_arrays(self) -> dict:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}


def encode(model: VaeModel, trajectory) -> LatentCode:
    mu, lv = model.encode_batch(trajectory)
    return LatentCode(mu[0], lv[0])


def decode(model: VaeModel, z) -> Trajectory:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ValueError(f"z must have shape ({model.latent_dim},), got {z.shape}")
    return Trajectory(model.decode_batch(z)[0], source=Source.SYNTHETIC)


def reparameterize(code: LatentCode, epsilon) -> np.ndarray:
    mu = np.asarray(code.mu, dtype=np.float64)
    lv = np.clip(np.asarray(code.log_var, dtype=np.float64), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    eps = np.asarray(epsilon, dtype=np.float64)
    if not (mu.shape == lv.shape == eps.shape):
        raise ValueError(f"shape mismatch: mu {mu.shape}, log_var {lv.shape}, epsilon {eps.shape}")
    return mu + np.exp(0.5 * lv) * eps


def gaussian_kl(mu: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """Batch mean of KL(N(mu, exp(log_var)) || N(0, I))."""
    return 0.5 * torch.sum(torch.exp(log_var) + mu * mu - 1.0 - log_var, dim=1).mean()


def elbo_loss(model: VaeModel, batch: torch.Tensor, epsilon: torch.Tensor):
    """Weighted negative ELBO on a ``(B, 2, L)`` batch.

    Returns ``(total, rec, kl)`` where ``rec`` is the mean squared error over
    all coordinates and ``kl`` the batch-mean Gaussian KL to the prior.
    """
    mu, lv = model.forward_encode(batch)
    z = mu + torch.exp(0.5 * lv) * epsilon
    recon = model.forward_decode(z)
    rec = torch.mean((recon - batch) ** 2)
    kl = gaussian_kl(mu, lv)
    total = model.config.lambda_rec * rec + model.config.kl_weight * kl
    return total, rec, kl


def build_vae(length: int, config: VaeConfig, dtype=torch.float32) -> VaeModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = VaeModel(length, config)
    return model.to(dtype)


def train_vae(dataset: Dataset, config: VaeConfig, log_every: int = 0) -> VaeModel:
    """Fit the VAE with Adam on the weighted ELBO; deterministic given ``config.seed``."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if not dataset.is_normalized:
        log.warning("training VAE on a dataset that is not marked normalized")
    model = build_vae(dataset.length, config)
    data = torch.as_tensor(np.array(dataset.points), dtype=torch.float32).transpose(1, 2).contiguous()
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    n = data.shape[0]
    bs = min(config.batch_size, n)
    model.train()
    for epoch in range(config.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for b, s in enumerate(range(0, n, bs)):
            batch = data[perm[s : s + bs]]
            eps = torch.randn(batch.shape[0], config.latent_dim, generator=gen)
            loss, _, _ = elbo_loss(model, batch, eps)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite VAE loss at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * batch.shape[0]
            count += batch.shape[0]
        model.loss_log.append(total / count)
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            log.info("vae epoch %d loss %.6f", epoch, model.loss_log[-1])
    model.eval()
    return model


def save_vae(model: VaeModel, path) -> None:
    cfg = asdict(model.config)
    cfg["channels"] = list(model.config.channels)
    save_checkpoint(path, "vae", cfg, model.state_arrays(), {"length": model.length, "loss_log": model.loss_log})


def load_vae(path) -> VaeModel:
    meta, tensors = load_checkpoint(path, "vae")
    config = VaeConfig(**meta["config"])
    model = VaeModel(int(meta["extra"]["length"]), config)
    dtype = torch.float64 if next(iter(tensors.values())).dtype == np.float64 else torch.float32
    model = model.to(dtype)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    model.loss_log = list(meta["extra"].get("loss_log", []))
    model.eval()
    return model
