"""Decode latency and quality versus caption length, NAR against AR.

For each target length the harness selects the examples whose reference has
exactly that many words, times one caption at a time for both decoders, and
scores each bucket with corpus BLEU@4. Timed AR runs are forced to emit exactly
the target number of tokens; AR quality comes from an untimed free decode so it
gets no length hint the NAR lacks.
"""
from __future__ import annotations

import csv
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data import CaptionDataset
from .diffusion import make_plan
from .errors import ConfigError
from .lm import ar_decode_baseline
from .metrics import bleu4
from .numkernel import RngState
from .pipeline import generate
from .textcodec import to_text
from .training import TrainState, schedule_for

BENCH_COLUMNS = ["mode", "length", "median_ms", "p90_ms", "bleu4"]


def bucket(data: CaptionDataset, length: int, max_items: Optional[int] = None) -> list[int]:
    """Pair indices whose caption has ``length`` words (all pairs if none do)."""
    idx = [i for i, s in enumerate(data.pair_seqs) if s.length == length]
    if not idx:
        idx = list(range(len(data)))
    return idx[:max_items] if max_items else idx


def run_bench(nar: TrainState, ar: TrainState, data: CaptionDataset, lengths: Sequence[int],
              repeats: int = 5, n_steps: Optional[int] = None, eta: float = 0.0,
              seed: int = 0, max_items: Optional[int] = None) -> list[dict]:
    n_v = min(nar.cfg.n_v, ar.cfg.n_v)
    for length in lengths:
        if not 1 <= length <= n_v - 1:
            raise ConfigError(f"target length {length} does not fit a canvas of {n_v} (EOS included)")
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    torch.set_num_threads(1)
    sched = schedule_for(nar.cfg)
    plan = make_plan(n_steps or nar.cfg.n_steps, nar.cfg.T, eta)
    nar.model.eval()
    ar.model.eval()
    rows = []
    for length in lengths:
        idx = bucket(data, length, max_items)
        times = {"nar": [], "ar": []}
        hyps = {"nar": {}, "ar": {}}
        for rep in range(repeats):
            for i in idx:
                v = data.conditions([i])[0]
                t0 = time.perf_counter()
                seq = generate(v, nar.model, sched, plan, RngState(seed, stream=i), nar.vocab)
                times["nar"].append((time.perf_counter() - t0) * 1e3)
                if rep == 0:
                    hyps["nar"][i] = to_text(seq, nar.vocab)
                t0 = time.perf_counter()
                ar_decode_baseline(v, ar.model, ar.vocab, max_len=length, min_len=length)
                times["ar"].append((time.perf_counter() - t0) * 1e3)
                if rep == 0:
                    hyps["ar"][i] = to_text(ar_decode_baseline(v, ar.model, ar.vocab), ar.vocab)
        refs = {i: [data.pair_text[i]] for i in idx}
        for mode in ("nar", "ar"):
            corpus = {str(i): (h, refs[i]) for i, h in hyps[mode].items()}
            rows.append({
                "mode": mode,
                "length": length,
                "median_ms": float(np.median(times[mode])),
                "p90_ms": float(np.percentile(times[mode], 90)),
                "bleu4": bleu4(corpus),
            })
    return rows


def write_bench_csv(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BENCH_COLUMNS})


def read_bench_csv(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return [{"mode": r["mode"], "length": int(r["length"]), "median_ms": float(r["median_ms"]),
                 "p90_ms": float(r["p90_ms"]), "bleu4": float(r["bleu4"])}
                for r in csv.DictReader(fh)]


def latency_slope(rows, mode: str) -> float:
    """Least-squares slope of median_ms against length (ms per token)."""
    pts = sorted((r["length"], r["median_ms"]) for r in rows if r["mode"] == mode)
    x, y = np.array(pts, dtype=float).T
    return float(np.polyfit(x, y, 1)[0])


def bleu_degradation(rows, mode: str) -> float:
    """BLEU@4 at the shortest length minus BLEU@4 at the longest."""
    pts = sorted((r["length"], r["bleu4"]) for r in rows if r["mode"] == mode)
    return pts[0][1] - pts[-1][1]
