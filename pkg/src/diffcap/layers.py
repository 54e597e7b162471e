"""nn.Module wrappers around the numkernel ops, plus seeded initialization."""
from __future__ import annotations

import math

import torch
from torch import nn

from . import numkernel as nk
from .errors import ConfigError
from .numkernel import RngState


class Linear(nn.Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(d_in, d_out))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.zero_init = zero_init

    def forward(self, x):
        y = x @ self.weight
        return y if self.bias is None else y + self.bias


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return nk.layernorm(x, self.gain, self.bias, self.eps)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.o = Linear(dim, dim, zero_init=zero_out)

    def params(self) -> nk.AttentionParams:
        return nk.AttentionParams(self.q.weight, self.k.weight, self.v.weight, self.o.weight,
                                  self.q.bias, self.k.bias, self.v.bias, self.o.bias)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        return nk.mha(x, context, context, self.heads, self.params(), mask=mask)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4, zero_out: bool = False):
        super().__init__()
        self.fc1 = Linear(dim, dim * mult)
        self.fc2 = Linear(dim * mult, dim, zero_init=zero_out)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def init_parameters(model: nn.Module, rng: RngState, embed_std: float = 1.0,
                    pos_std: float = 1.0) -> None:
    """Seeded init: fan-in scaled normals for Linear, N(0, embed_std) for the
    token table and N(0, pos_std) for learned positions.

    Linear layers flagged ``zero_init`` get zero weights, so residual branches
    start as identity. Parameters are visited in registration order, which
    makes the init a pure function of (architecture, seed).
    """
    from .textcodec import PAD, EmbeddingTable

    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, Linear):
                if module.zero_init:
                    module.weight.zero_()
                else:
                    std = 1.0 / math.sqrt(module.weight.shape[0])
                    module.weight.copy_(rng.normal(module.weight.shape) * std)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, EmbeddingTable):
                module.weight.copy_(rng.normal(module.weight.shape) * embed_std)
                module.weight[PAD].zero_()
            elif isinstance(module, LearnedPositions):
                module.weight.copy_(rng.normal(module.weight.shape) * pos_std)


class LearnedPositions(nn.Module):
    def __init__(self, n: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(n, dim))

    def forward(self, length: int):
        return self.weight[:length]
