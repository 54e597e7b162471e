"""Inference: Gaussian noise -> DDIM loop over the denoiser -> parallel LM decode.

Nothing here takes a caption as input; generation is driven by the visual
condition alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

import torch

from .data import CaptionDataset
from .diffusion import DdimPlan, VarianceSchedule, ddim_step, make_plan
from .errors import GenerationError
from .lm import ARCaptioner, ar_decode_baseline, argmax_lowest
from .metrics import bleu4, cider, rouge_l
from .model import DiffCapModel
from .numkernel import RngState, log_softmax, softmax
from .textcodec import TokenSeq, Vocabulary, decode_ids, to_text


@dataclass
class Trace:
    """Extra outputs of a generation run, useful for diagnostics and tests."""

    x0_hat: torch.Tensor
    s: torch.Tensor
    denoiser_calls: int


@torch.no_grad()
def sample_x0(model: DiffCapModel, v: torch.Tensor, sched: VarianceSchedule, plan: DdimPlan,
              rng: RngState, noise: Optional[torch.Tensor] = None):
    """Run the DDIM loop for a batch of conditions (B, N_f, d_f); returns (x0_hat, calls)."""
    model.eval()
    b = v.shape[0]
    shape = (b, model.n_v, model.d_v)
    x = rng.normal(shape) if noise is None else noise
    tau = plan.tau
    calls = 0
    x0_hat = None
    for k in range(len(tau) - 1, -1, -1):
        t = torch.full((b,), tau[k], dtype=torch.long)
        x0_hat = model.denoiser(x, v, t)
        calls += 1
        if k > 0:
            x = ddim_step(x, x0_hat, tau[k], tau[k - 1], sched, plan.eta, rng)
    if not torch.isfinite(x0_hat).all():
        raise GenerationError("denoiser produced non-finite values")
    return x0_hat, calls


@torch.no_grad()
def generate(v: torch.Tensor, model: DiffCapModel, sched: VarianceSchedule, plan: DdimPlan,
             rng: RngState, vocab: Vocabulary, return_trace: bool = False):
    """Caption one condition (N_f, d_f) or a batch (B, N_f, d_f)."""
    single = v.dim() == 2
    vb = v.unsqueeze(0) if single else v
    x0_hat, calls = sample_x0(model, vb, sched, plan, rng)
    s = softmax(model.lm(x0_hat), axis=-1)
    seqs = [decode_ids(row, vocab) for row in argmax_lowest(s).tolist()]
    out = seqs[0] if single else seqs
    if return_trace:
        return out, Trace(x0_hat, s, calls)
    return out


@torch.no_grad()
def generate_batch(vs: Sequence[torch.Tensor], model, sched, plan, seeds: Sequence[int],
                   vocab: Vocabulary) -> tuple[list[TokenSeq], list[float]]:
    """One caption per condition with its own seed; per-item wall time in ms."""
    seqs, times = [], []
    for v, seed in zip(vs, seeds):
        t0 = time.perf_counter()
        seqs.append(generate(v, model, sched, plan, RngState(seed), vocab))
        times.append((time.perf_counter() - t0) * 1e3)
    return seqs, times


@torch.no_grad()
def caption_dataset(model, data: CaptionDataset, sched=None, plan=None, seed: int = 0,
                    batch_size: int = 64) -> dict:
    """video_id -> generated caption text, for every video in ``data``."""
    vocab = data.vocab
    out = {}
    n = len(data.video_ids)
    for start in range(0, n, batch_size):
        vids = list(range(start, min(n, start + batch_size)))
        v = data.features[vids]
        if isinstance(model, ARCaptioner):
            seqs = [ar_decode_baseline(v[i], model, vocab) for i in range(len(vids))]
        else:
            seqs = generate(v, model, sched, plan, RngState(seed, stream=start), vocab)
        for vi, seq in zip(vids, seqs):
            out[data.video_ids[vi]] = to_text(seq, vocab)
    return out


def score_captions(hyps: dict, refs: dict) -> dict:
    corpus = {k: (h, refs[k]) for k, h in hyps.items()}
    exact = sum(h in refs[k] for k, h in hyps.items()) / max(len(hyps), 1)
    return {"exact_match": exact, "bleu4": bleu4(corpus), "rouge_l": rouge_l(corpus),
            "cider": cider(corpus) if len(corpus) >= 2 else None, "n_ids": len(corpus)}


@torch.no_grad()
def reference_loglik(model: DiffCapModel, data: CaptionDataset, sched, plan, seed: int = 0,
                     batch_size: int = 64) -> float:
    """Mean per-position log-probability the generated distribution assigns to the
    reference canvas (tokens, EOS and MASK fill). A continuous quality score."""
    total, count = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = list(range(start, min(len(data), start + batch_size)))
        v = data.conditions(idx)
        x0_hat, _ = sample_x0(model, v, sched, plan, RngState(seed, stream=start))
        logp = log_softmax(model.lm(x0_hat), axis=-1)
        tgt = data.targets(idx)
        total += float(logp.gather(-1, tgt.unsqueeze(-1)).sum())
        count += tgt.numel()
    return total / count


def default_plan(T: int, n_steps: int = 20, eta: float = 0.0) -> DdimPlan:
    return make_plan(n_steps, T, eta)
