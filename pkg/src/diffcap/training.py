"""Joint objective, Adam training loop, checkpoints and the CSV training log.

Checkpoint layout (little-endian)::

    b"DFVC" | u32 version | u32 header_len | JSON header | float32 payloads

The header lists tensor names and shapes in payload order together with the
config snapshot, vocabulary, optimizer step, RNG state and epoch counter.
"""
from __future__ import annotations

import csv
import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import TrainConfig
from .data import CaptionDataset
from .diffusion import VarianceSchedule, make_schedule, q_sample
from .errors import CheckpointError, NaNLossError
from .lm import ARCaptioner, teacher_forcing_inputs
from .model import build_model
from .numkernel import RngState, log_softmax
from .textcodec import EOS, PAD, Vocabulary

CKPT_MAGIC = b"DFVC"
CKPT_VERSION = 1
LOG_COLUMNS = ["epoch", "step", "loss_total", "loss_mse", "loss_ce", "lr", "wall_ms"]


def loss_mse(x0_hat: torch.Tensor, x0: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all coordinates."""
    return ((x0_hat - x0) ** 2).mean(dtype=torch.float64).to(x0_hat.dtype)


def loss_ce(s: torch.Tensor, target: torch.Tensor, is_log: bool = False,
            weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean negative log-likelihood of ``target`` ids over non-PAD positions.

    ``s`` holds probabilities, or log-probabilities when ``is_log``. MASK
    positions after EOS count like any other token. ``weights`` (same shape as
    ``target``) can further restrict the supervised positions.
    """
    log_s = s if is_log else torch.log(s.clamp_min(1e-30))
    nll = -log_s.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    keep = (target != PAD).to(nll.dtype)
    if weights is not None:
        keep = keep * weights
    return (nll * keep).sum(dtype=torch.float64).to(nll.dtype) / keep.sum().clamp_min(1.0)


def loss_total(mse, ce, weights=(1.0, 1.0)):
    return weights[0] * mse + weights[1] * ce


def schedule_for(cfg: TrainConfig) -> VarianceSchedule:
    return make_schedule(cfg.T, cfg.schedule, cfg.beta_start, cfg.beta_end)


def ar_target_weights(targets: torch.Tensor) -> torch.Tensor:
    """1 up to and including the first EOS, 0 afterwards."""
    is_eos = (targets == EOS).to(torch.long)
    after = torch.cumsum(is_eos, dim=1) - is_eos
    return (after == 0).to(torch.float32)


def compute_losses(model, v, targets, sched: Optional[VarianceSchedule], rng: RngState,
                   cfg: TrainConfig, t: Optional[np.ndarray] = None) -> dict:
    """Loss terms for one batch. Returns a dict of scalar tensors plus the t draws."""
    if isinstance(model, ARCaptioner):
        logits = model(teacher_forcing_inputs(targets), v, rng=rng)
        ce = loss_ce(log_softmax(logits), targets, is_log=True,
                     weights=ar_target_weights(targets))
        mse = torch.zeros((), dtype=ce.dtype)
        return {"mse": mse, "ce": ce, "total": cfg.w_ce * ce, "t": None}
    x0 = model.embedding(targets)
    if t is None:
        t = rng.integers(1, sched.T, size=targets.shape[0])
    x_t = q_sample(x0, t, sched, rng)
    x0_hat = model.denoiser(x_t, v, torch.from_numpy(np.asarray(t)), rng=rng)
    logits = model.lm(x0_hat, rng=rng)
    mse = loss_mse(x0_hat, x0)
    ce = loss_ce(log_softmax(logits), targets, is_log=True)
    return {"mse": mse, "ce": ce, "total": loss_total(mse, ce, (cfg.w_mse, cfg.w_ce)), "t": t}


def make_optimizer(model, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def train_step(model, v, targets, sched, opt, rng: RngState, cfg: TrainConfig) -> dict:
    """One optimizer update; returns float loss terms."""
    model.train()
    opt.zero_grad(set_to_none=True)
    losses = compute_losses(model, v, targets, sched, rng, cfg)
    total = losses["total"]
    if not torch.isfinite(total):
        diag = {"t": None if losses["t"] is None else np.asarray(losses["t"]).tolist(),
                "loss_mse": losses["mse"].item(), "loss_ce": losses["ce"].item()}
        raise NaNLossError(f"non-finite loss: {diag}", diag)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return {"loss_total": total.item(), "loss_mse": losses["mse"].item(),
            "loss_ce": losses["ce"].item()}


@dataclass
class TrainState:
    model: torch.nn.Module
    opt: torch.optim.Adam
    cfg: TrainConfig
    vocab: Vocabulary
    d_f: int
    rng: RngState
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def sched(self) -> Optional[VarianceSchedule]:
        return None if self.cfg.arch == "ar" else schedule_for(self.cfg)


def init_state(cfg: TrainConfig, vocab: Vocabulary, d_f: int) -> TrainState:
    model = build_model(cfg, len(vocab), d_f)
    return TrainState(model, make_optimizer(model, cfg), cfg, vocab, d_f, RngState(cfg.seed, 2))


def train(state: TrainState, dataset: CaptionDataset, epochs: Optional[int] = None,
          log_path=None, ckpt_path=None,
          on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Run epochs (default ``cfg.epochs``), appending per-step rows to history/log."""
    cfg = state.cfg
    sched = state.sched
    epochs = cfg.epochs if epochs is None else epochs
    writer = None
    log_file = None
    if log_path is not None:
        log_path = Path(log_path)
        new = not log_path.exists() or log_path.stat().st_size == 0
        log_file = open(log_path, "a", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_COLUMNS)
        if new:
            writer.writeheader()
    try:
        for _ in range(epochs):
            state.epoch += 1
            for idx in dataset.batches(cfg.batch_size, state.rng):
                t0 = time.perf_counter()
                row = train_step(state.model, dataset.conditions(idx), dataset.targets(idx),
                                 sched, state.opt, state.rng, cfg)
                state.step += 1
                row = {"epoch": state.epoch, "step": state.step, **row, "lr": cfg.lr,
                       "wall_ms": (time.perf_counter() - t0) * 1e3}
                state.history.append(row)
                if writer is not None:
                    writer.writerow(row)
            if ckpt_path is not None and state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(ckpt_path, state)
            if on_epoch is not None:
                on_epoch(state)
    finally:
        if log_file is not None:
            log_file.close()
    return state


def _optimizer_tensors(state: TrainState):
    names = [n for n, _ in state.model.named_parameters()]
    params = [p for _, p in state.model.named_parameters()]
    moments = []
    step = 0
    for name, p in zip(names, params):
        st = state.opt.state.get(p)
        if not st:
            continue
        step = int(st["step"])
        moments.append((f"opt.exp_avg.{name}", st["exp_avg"]))
        moments.append((f"opt.exp_avg_sq.{name}", st["exp_avg_sq"]))
    return moments, step


def save_checkpoint(path, state: TrainState) -> None:
    tensors = [(f"param.{n}", p.detach()) for n, p in state.model.named_parameters()]
    moments, opt_step = _optimizer_tensors(state)
    tensors += moments
    header = {
        "config": state.cfg.to_dict(),
        "vocab": state.vocab.to_json(),
        "d_f": state.d_f,
        "epoch": state.epoch,
        "step": state.step,
        "opt_step": opt_step,
        "rng": state.rng.get_state(),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hbytes)), hbytes]
    for _, t in tensors:
        chunks.append(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    missing = {"config", "vocab", "d_f", "epoch", "step", "opt_step", "rng", "tensors"} - set(header)
    if missing:
        raise CheckpointError(f"{path}: header lacks {sorted(missing)}")
    cfg = TrainConfig.from_dict(header["config"])
    vocab = Vocabulary.from_json(header["vocab"])
    state = init_state(cfg, vocab, header["d_f"])
    offset = 12 + hlen
    values = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if offset + 4 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(entry["shape"])
        values[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: payload length does not match header")
    params = dict(state.model.named_parameters())
    with torch.no_grad():
        for name, p in params.items():
            key = f"param.{name}"
            if key not in values:
                raise CheckpointError(f"{path}: missing tensor {key}")
            p.copy_(values[key])
    if header["opt_step"]:
        for name, p in params.items():
            if f"opt.exp_avg.{name}" not in values:
                continue  # parameter never updated
            state.opt.state[p] = {
                "step": torch.tensor(float(header["opt_step"])),
                "exp_avg": values[f"opt.exp_avg.{name}"].clone(),
                "exp_avg_sq": values[f"opt.exp_avg_sq.{name}"].clone(),
            }
    state.rng = RngState.from_state(header["rng"])
    state.epoch = header["epoch"]
    state.step = header["step"]
    return state


def smoothed(values, window: int = 5) -> list:
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1): i + 1]
        out.append(sum(chunk) / len(chunk))
    return out
