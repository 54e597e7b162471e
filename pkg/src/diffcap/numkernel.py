"""Dense tensor kernel: the handful of differentiable ops the models need.

Storage is float32 (see ``DTYPE``); reductions inside softmax and layernorm
accumulate in float64. Reverse-mode differentiation is delegated to torch
autograd, while :func:`grad_check` provides an independent central
finite-difference oracle.

Randomness goes through :class:`RngState`, a thin wrapper over numpy's
counter-based Philox generator, so every stochastic draw in the package is
reproducible from one integer seed.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, DimensionError

DTYPE = torch.float32
RNG_ALGORITHM = "philox4x64"

Tensor = torch.Tensor


class RngState:
    """Seeded Philox stream. Same seed (and stream id) gives the same draws."""

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, stream: int) -> "RngState":
        """Independent child stream; does not advance the parent."""
        return RngState(self.seed, stream=(self.stream + 1) * 1_000_003 + int(stream))

    def normal(self, shape, dtype=DTYPE) -> Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape))).to(dtype)

    def uniform(self, shape) -> np.ndarray:
        return self._gen.random(tuple(shape))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        """Uniform integers in the closed range [low, high]."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        state = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "algorithm": self.algorithm,
            "bit_generator": _jsonable(state),
        }

    def set_state(self, state: dict) -> None:
        if state.get("algorithm", RNG_ALGORITHM) != RNG_ALGORITHM:
            raise ConfigError(f"unknown rng algorithm {state.get('algorithm')!r}")
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self._gen.bit_generator.state = _from_jsonable(state["bit_generator"])

    @classmethod
    def from_state(cls, state: dict) -> "RngState":
        rng = cls(state["seed"], state["stream"])
        rng.set_state(state)
        return rng


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


def configure_threads(threads: Optional[int] = None, deterministic: Optional[bool] = None) -> None:
    """Apply DIFFCAP_THREADS / DIFFCAP_DETERMINISTIC (arguments override env).

    Deterministic mode pins torch to one intra-op thread, so results do not
    depend on the requested thread count.
    """
    if threads is None:
        threads = int(os.environ.get("DIFFCAP_THREADS", "0"))
    if deterministic is None:
        deterministic = os.environ.get("DIFFCAP_DETERMINISTIC", "0") == "1"
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif threads > 0:
        torch.set_num_threads(threads)


def as_tensor(data, dtype=DTYPE) -> Tensor:
    return torch.as_tensor(data, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    if a.dim() < 2 or b.dim() < 2:
        raise DimensionError(f"matmul needs rank >= 2, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents differ: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax. NaN inputs propagate to NaN outputs."""
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    denom = e.sum(dim=axis, keepdim=True, dtype=torch.float64).to(x.dtype)
    return e / denom


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    lse = torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True, dtype=torch.float64)).to(x.dtype)
    return shifted - lse


def layernorm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None,
              eps: float = 1e-5) -> Tensor:
    """Standardize the last axis (biased variance, eps under the root), then affine."""
    if x.shape[-1] < 1:
        raise DimensionError("layernorm over an empty axis")
    acc = x.to(torch.float64)
    mean = acc.mean(dim=-1, keepdim=True)
    var = ((acc - mean) ** 2).mean(dim=-1, keepdim=True)
    y = ((acc - mean) / torch.sqrt(var + eps)).to(x.dtype)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


@dataclass
class AttentionParams:
    """Projection weights for one attention layer, stored as (in, out) matrices."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    b_q: Optional[Tensor] = None
    b_k: Optional[Tensor] = None
    b_v: Optional[Tensor] = None
    b_o: Optional[Tensor] = None


def _linear(x, w, b):
    y = x @ w
    return y if b is None else y + b


def mha(q: Tensor, k: Tensor, v: Tensor, heads: int, params: AttentionParams,
        mask: Optional[Tensor] = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (..., Lq, d), k and v: (..., Lk, d). ``mask`` is boolean, broadcastable
    to (..., Lq, Lk), True where attention is allowed. Self-attention is
    ``q is k is v``.
    """
    d = q.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if k.shape[-1] != d or v.shape[-1] != d:
        raise DimensionError(f"q/k/v dims differ: {d}, {k.shape[-1]}, {v.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError("key and value lengths differ")
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-3, -2)

    qh = split(_linear(q, params.w_q, params.b_q))
    kh = split(_linear(k, params.w_k, params.b_k))
    vh = split(_linear(v, params.w_v, params.b_v))
    scores = (qh @ kh.transpose(-1, -2)) / math.sqrt(dh)
    if mask is not None:
        scores = scores.masked_fill(~mask.unsqueeze(-3), float("-inf"))
    att = softmax(scores, axis=-1)
    out = (att @ vh).transpose(-3, -2)
    out = out.reshape(*out.shape[:-2], d)
    return _linear(out, params.w_o, params.b_o)


def droppath(x: Tensor, rate: float, training: bool, rng: Optional[RngState]) -> Tensor:
    """Stochastic depth: drop whole samples along axis 0, rescale survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"drop-path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("drop-path in training mode needs an rng")
    keep = torch.from_numpy(rng.uniform((x.shape[0],)) >= rate).to(x.dtype)
    keep = keep.reshape(x.shape[0], *([1] * (x.dim() - 1)))
    return x * keep / (1.0 - rate)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autograd and central differences.

    Runs in float64; ``f`` must map a tensor shaped like ``x`` to a scalar.
    """
    x64 = x.detach().to(torch.float64).clone().requires_grad_(True)
    out = f(x64)
    (analytic,) = torch.autograd.grad(out, x64)
    analytic = analytic.detach().reshape(-1)
    flat = x64.detach().clone().reshape(-1)
    fd = torch.empty_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = f(flat.reshape(x.shape)).item()
            flat[i] = orig - step
            lo = f(flat.reshape(x.shape)).item()
            flat[i] = orig
            fd[i] = (hi - lo) / (2 * step)
    err = (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-12)
    return float(err.max())
