"""Discriminative denoiser: predicts x_0 from (x_t, visual condition, t).

Text latents act as queries throughout; the visual condition only ever
enters as keys/values of a dedicated cross-attention, so it is never mixed
into the text self-attention.
"""
from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn

from .errors import ConfigError
from .layers import Attention, FeedForward, LayerNorm, LearnedPositions, Linear
from .numkernel import RngState, droppath


def sinusoidal_table(T: int, dim: int) -> torch.Tensor:
    """Row t-1 holds the embedding of timestep t."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    t = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    table = torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=1)
    if dim % 2:
        table = torch.cat([table, torch.zeros(T, 1, dtype=torch.float64)], dim=1)
    return table.float()


class TimestepEmbedding(nn.Module):
    def __init__(self, T: int, dim: int):
        super().__init__()
        self.register_buffer("table", sinusoidal_table(T, dim), persistent=False)
        self.fc1 = Linear(dim, dim)
        self.fc2 = Linear(dim, dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(nn.functional.silu(self.fc1(self.table[t - 1])))


class DenoiserBlock(nn.Module):
    """Pre-LN block: self-attention over text, cross-attention to the condition, FFN.

    Residual output projections are zero-initialized, so a fresh block is the
    identity on ``h``.
    """

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, drop_path: float = 0.0):
        super().__init__()
        self.ln_self = LayerNorm(dim)
        self.self_attn = Attention(dim, heads, zero_out=True)
        self.ln_cross = LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, zero_out=True)
        self.ln_ffn = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_mult, zero_out=True)
        self.drop_path = drop_path

    def forward(self, h, cond, t_emb=None, mask=None, rng: Optional[RngState] = None):
        dp = lambda x: droppath(x, self.drop_path, self.training, rng)  # noqa: E731
        x = h if t_emb is None else h + t_emb.unsqueeze(-2)
        h = h + dp(self.self_attn(self.ln_self(x), mask=mask))
        h = h + dp(self.cross_attn(self.ln_cross(h), context=cond))
        return h + dp(self.ffn(self.ln_ffn(h)))


class ConditionProjection(nn.Module):
    """Maps a (N_f, d_f) visual condition into the model width."""

    def __init__(self, d_f: int, dim: int):
        super().__init__()
        self.d_f = d_f
        self.proj = Linear(d_f, dim)
        self.norm = LayerNorm(dim)

    def forward(self, v):
        if v.shape[-1] != self.d_f:
            raise ConfigError(f"condition width {v.shape[-1]} != configured d_f {self.d_f}")
        return self.norm(self.proj(v))


class Denoiser(nn.Module):
    def __init__(self, n_v: int, dim: int, d_f: int, T: int, n_blocks: int = 12,
                 heads: int = 4, ffn_mult: int = 4, drop_path: float = 0.0):
        super().__init__()
        if n_blocks < 1:
            raise ConfigError("denoiser needs at least one block")
        self.T = T
        self.in_proj = Linear(dim, dim)
        self.pos = LearnedPositions(n_v, dim)
        self.cond = ConditionProjection(d_f, dim)
        self.time = TimestepEmbedding(T, dim)
        self.blocks = nn.ModuleList(
            DenoiserBlock(dim, heads, ffn_mult, drop_path) for _ in range(n_blocks))
        self.ln_out = LayerNorm(dim)
        self.head = Linear(dim, dim)

    def forward(self, x_t: torch.Tensor, v: torch.Tensor, t: torch.Tensor,
                rng: Optional[RngState] = None) -> torch.Tensor:
        """x_t: (B, N_v, d), v: (B, N_f, d_f), t: (B,) ints in [1, T]. Returns x0_hat."""
        if int(t.min()) < 1 or int(t.max()) > self.T:
            raise ConfigError(f"timestep outside [1, {self.T}]")
        h = self.in_proj(x_t) + self.pos(x_t.shape[-2])
        cond = self.cond(v)
        t_emb = self.time(t)
        for block in self.blocks:
            h = block(h, cond, t_emb, rng=rng)
        return self.head(self.ln_out(h))


def denoise(x_t, v, t, model: Denoiser, rng=None):
    if isinstance(t, int):
        t = torch.full((x_t.shape[0],), t, dtype=torch.long)
    return model(x_t, v, t, rng=rng)
