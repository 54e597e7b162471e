"""Variance schedules, forward noising and DDIM reverse steps over text latents.

Timesteps are 1-based: ``beta[t - 1]`` is the variance added at step ``t``
and ``alpha_bar(0) == 1``. Schedule tables are kept in float64; sampled
latents come back in the dtype of the input.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, NumericGuardError, RangeError
from .numkernel import RngState


@dataclass(frozen=True)
class VarianceSchedule:
    T: int
    kind: str
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t: int) -> float:
        """alpha_bar at timestep t, with alpha_bar(0) = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def b(self, t: int) -> float:
        return float(self.beta[t - 1])

    def to_json(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_json(cls, obj: dict) -> "VarianceSchedule":
        return schedule_from_betas(obj["beta"], kind=obj.get("kind", "custom"), T=obj["T"])

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "VarianceSchedule":
        return cls.from_json(json.loads(Path(path).read_text()))


def schedule_from_betas(beta, kind: str = "custom", T: int | None = None,
                        allow_zero: bool = False) -> VarianceSchedule:
    """Build a schedule from explicit betas.

    ``allow_zero`` admits beta == 0, which is only meaningful in tests of the
    noiseless limit.
    """
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0:
        raise ConfigError("beta must be a non-empty vector")
    if T is not None and T != beta.size:
        raise ConfigError(f"T={T} but {beta.size} betas")
    lo_ok = beta >= 0 if allow_zero else beta > 0
    if not (lo_ok.all() and (beta < 1).all()):
        raise ConfigError("every beta must lie in (0, 1)")
    alpha = 1.0 - beta
    return VarianceSchedule(T=int(beta.size), kind=kind, beta=beta, alpha=alpha,
                            alpha_bar=np.cumprod(alpha))


def make_schedule(T: int = 1000, kind: str = "linear", beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> VarianceSchedule:
    """``linear`` (default), ``constant`` (uses beta_start) or ``cosine``."""
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    elif kind == "constant":
        beta = np.full(T, beta_start)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1 - f[1:] / f[:-1], beta_start, min(beta_end, 0.999))
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    return schedule_from_betas(beta, kind=kind)


def _check_t(t, T):
    tt = np.asarray(t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise RangeError(f"timestep {t} outside [1, {T}]")


def _per_example(values: np.ndarray, t, x: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at t (int or per-example vector) shaped to broadcast on x."""
    tt = np.asarray(t)
    vals = values[tt - 1]
    out = torch.as_tensor(vals, dtype=x.dtype)
    if tt.ndim == 1:
        out = out.reshape(-1, *([1] * (x.dim() - 1)))
    return out


def q_sample(x0: torch.Tensor, t, sched: VarianceSchedule, rng: RngState,
             noise: torch.Tensor | None = None) -> torch.Tensor:
    """Closed-form draw x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is an int or a per-example vector over axis 0 of ``x0``.
    """
    _check_t(t, sched.T)
    if noise is None:
        noise = rng.normal(x0.shape, dtype=x0.dtype)
    ab = _per_example(sched.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


def q_step(x_prev: torch.Tensor, t, sched: VarianceSchedule, rng: RngState) -> torch.Tensor:
    """One forward step x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) eps."""
    _check_t(t, sched.T)
    a = _per_example(sched.alpha, t, x_prev)
    eps = rng.normal(x_prev.shape, dtype=x_prev.dtype)
    return torch.sqrt(a) * x_prev + torch.sqrt(1.0 - a) * eps


@dataclass(frozen=True)
class DdimPlan:
    tau: tuple
    eta: float = 0.0

    def __post_init__(self):
        tau = self.tau
        if len(tau) == 0 or any(b <= a for a, b in zip(tau, tau[1:])) or tau[0] < 1:
            raise ConfigError(f"tau must be a strictly increasing subsequence of 1..T: {tau}")
        if self.eta < 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")

    @property
    def n_steps(self) -> int:
        return len(self.tau)


def make_plan(n_steps: int = 20, T: int = 1000, eta: float = 0.0) -> DdimPlan:
    """Evenly spaced tau_i = round(i * T / n), i = 1..n, so tau_n == T."""
    if not 1 <= n_steps <= T:
        raise ConfigError(f"need 1 <= n_steps <= T, got n_steps={n_steps}, T={T}")
    tau = tuple(int(math.floor(i * T / n_steps + 0.5)) for i in range(1, n_steps + 1))
    return DdimPlan(tau=tau, eta=float(eta))


def ddim_sigma2(sched: VarianceSchedule, t_from: int, t_to: int, eta: float) -> float:
    return eta * (1.0 - sched.ab(t_to)) / (1.0 - sched.ab(t_from)) * sched.b(t_from)


def ddim_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t_from: int, t_to: int,
              sched: VarianceSchedule, eta: float = 0.0,
              rng: RngState | None = None) -> torch.Tensor:
    """Move from t_from to an earlier t_to given a prediction of x_0.

    With eta == 0 no noise is drawn and the step is deterministic.
    """
    if not 0 <= t_to < t_from <= sched.T:
        raise RangeError(f"need 0 <= t_to < t_from <= T, got {t_to}, {t_from}")
    ab_from, ab_to = sched.ab(t_from), sched.ab(t_to)
    sigma2 = ddim_sigma2(sched, t_from, t_to, eta)
    radicand = 1.0 - ab_to - sigma2
    if radicand < 0:
        raise NumericGuardError(
            f"negative radicand 1 - ab({t_to}) - sigma^2 = {radicand:.3e} "
            f"(ab_from={ab_from:.6g}, ab_to={ab_to:.6g}, beta={sched.b(t_from):.6g}, eta={eta})")
    eps_dir = (x_t - math.sqrt(ab_from) * x0_hat) / math.sqrt(1.0 - ab_from)
    out = math.sqrt(ab_to) * x0_hat + math.sqrt(radicand) * eps_dir
    if sigma2 > 0:
        if rng is None:
            raise ConfigError("eta > 0 needs an rng")
        out = out + math.sqrt(sigma2) * rng.normal(x_t.shape, dtype=x_t.dtype)
    return out
