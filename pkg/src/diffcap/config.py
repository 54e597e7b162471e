"""Training/model configuration."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class TrainConfig:
    # optimization (Adam, 80 epochs, lr 1e-4)
    epochs: int = 80
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    grad_clip: float = 1.0
    w_mse: float = 1.0
    w_ce: float = 1.0
    # diffusion
    T: int = 1000
    schedule: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    n_steps: int = 20
    eta: float = 0.0
    # architecture
    arch: str = "nar"  # "nar" or "ar" (comparison baseline)
    n_denoiser_blocks: int = 12
    n_lm_blocks: int = 6
    n_v: int = 20
    d_v: int = 64
    heads: int = 4
    ffn_mult: int = 4
    drop_path: float = 0.0
    residual_first_layer: bool = False
    embed_std: float = 1.0
    pos_std: float = 1.0
    # data / output
    features_dir: Optional[str] = None
    captions_path: Optional[str] = None
    min_freq: int = 1
    out_dir: str = "runs/default"
    checkpoint_every: int = 1
    extra: dict = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        positive = ["epochs", "lr", "batch_size", "T", "n_steps", "n_denoiser_blocks",
                    "n_lm_blocks", "n_v", "d_v", "heads", "ffn_mult", "grad_clip"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.w_mse < 0 or self.w_ce < 0 or self.w_mse + self.w_ce == 0:
            raise ConfigError("loss weights must be non-negative and not both zero")
        if self.arch not in ("nar", "ar"):
            raise ConfigError(f"arch must be 'nar' or 'ar', got {self.arch!r}")
        if self.d_v % self.heads:
            raise ConfigError(f"d_v={self.d_v} not divisible by heads={self.heads}")
        if self.n_steps > self.T:
            raise ConfigError("n_steps cannot exceed T")
        if not 0 <= self.drop_path < 1:
            raise ConfigError("drop_path must be in [0, 1)")
        if self.n_v < 2:
            raise ConfigError("n_v must be >= 2")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        obj.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(obj)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes).validate()
