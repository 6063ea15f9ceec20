"""1D U-Net noise predictor with sinusoidal time embedding and FiLM conditioning."""

from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int, max_groups: int = 8) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


class FiLM(nn.Module):
    """Channel-wise ``(1 + scale) * h + shift`` from an embedding; identity at init."""

    def __init__(self, emb_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(emb_dim, 2 * channels)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h, emb):
        scale, shift = self.proj(emb).chunk(2, dim=1)
        return (1.0 + scale[:, :, None]) * h + shift[:, :, None]


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.time = nn.Linear(emb_dim, c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.film = FiLM(emb_dim, c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb, cemb):
        h = F.silu(self.norm1(self.conv1(x)) + self.time(temb)[:, :, None])
        h = F.silu(self.film(self.norm2(self.conv2(h)), cemb))
        return h + self.skip(x)


class SelfAttention1d(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.out = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        w = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(q.shape[1]), dim=-1)
        return x + self.out(torch.einsum("bij,bcj->bci", w, v))


class UNet1d(nn.Module):
    """Encoder/decoder over ``(B, 2, L)`` with one level per entry of ``widths``.

    Every residual block receives a per-level projection of the time
    embedding (added after the first normalization) and FiLM modulation from
    the condition embedding (after the second). The bottleneck carries
    self-attention. ``L`` must be divisible by ``2 ** (len(widths) - 1)``.
    """

    def __init__(self, cond_dim: int, widths=(32, 64, 128, 128), time_dim: int = 64, emb_dim: int = 128, attention: bool = True):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        self.widths = widths
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_mlp = nn.Sequential(nn.Linear(cond_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inp = nn.Conv1d(2, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(prev, w, emb_dim))
            self.downsample.append(nn.Conv1d(w, w, 3, stride=2, padding=1) if i < len(widths) - 1 else nn.Identity())
            prev = w
        self.mid1 = ResBlock(prev, prev, emb_dim)
        self.attn = SelfAttention1d(prev) if attention else nn.Identity()
        self.mid2 = ResBlock(prev, prev, emb_dim)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            self.up.append(ResBlock(prev + w, w, emb_dim))
            self.upsample.append(nn.Conv1d(w, widths[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = widths[i - 1] if i > 0 else w
        self.out_norm = nn.GroupNorm(_groups(widths[0]), widths[0])
        self.out = nn.Conv1d(widths[0], 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def min_length_multiple(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, x, t, cond):
        t = t.to(x.dtype)
        temb = self.time_mlp(sinusoidal_embedding(t, self.time_dim))
        cemb = self.cond_mlp(cond.to(x.dtype))
        h = self.inp(x)
        skips = []
        for block, down in zip(self.down, self.downsample):
            h = block(h, temb, cemb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.attn(self.mid1(h, temb, cemb)), temb, cemb)
        for k, (block, up) in enumerate(zip(self.up, self.upsample)):
            h = block(torch.cat([h, skips.pop()], dim=1), temb, cemb)
            if k < len(self.up) - 1:
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))
