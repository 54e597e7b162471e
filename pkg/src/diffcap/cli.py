"""Command-line entry point: synth / train / generate / eval / bench.

Exit codes: 0 ok, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .bench import run_bench, write_bench_csv
from .config import TrainConfig
from .data import (SyntheticSpec, generate_synthetic, load_dataset, load_features_dir,
                   read_captions, read_feature_file)
from .diffusion import make_plan
from .errors import DiffCapError, GenerationError, NumericGuardError
from .lm import ar_decode_baseline
from .metrics import corpus_from_files, evaluate
from .numkernel import RngState, configure_threads
from .pipeline import generate
from .textcodec import build_vocab, to_text
from .training import init_state, load_checkpoint, schedule_for, train

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_examples=args.n_examples, n_objects=args.n_objects,
                         n_actions=args.n_actions, n_scenes=args.n_scenes, d_f=args.d_f,
                         noise_std=args.noise_std, seed=args.seed, min_len=args.min_len,
                         max_len=args.max_len)
    features_dir, captions = generate_synthetic(spec, args.out)
    print(json.dumps({"features_dir": str(features_dir), "captions": str(captions),
                      "n_examples": spec.n_examples}))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {"epochs": args.epochs, "seed": args.seed, "lr": args.lr,
                 "batch_size": args.batch_size, "out_dir": args.out_dir,
                 "features_dir": args.features, "captions_path": args.captions, "arch": args.arch}
    cfg = TrainConfig.load(args.config, **overrides)
    if not cfg.features_dir or not cfg.captions_path:
        raise DiffCapError("config needs features_dir and captions_path")
    vocab = build_vocab([r["caption"] for r in read_captions(cfg.captions_path)], cfg.min_freq)
    data = load_dataset(cfg.features_dir, cfg.captions_path, vocab, cfg.n_v)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    log_path = out / "train_log.csv"
    if log_path.exists():
        log_path.unlink()
    state = init_state(cfg, vocab, data.d_f)
    train(state, data, log_path=log_path, ckpt_path=out / "model.ckpt")
    last = state.history[-1] if state.history else {}
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "epochs": state.epoch,
                      "steps": state.step, "final_loss": last.get("loss_total")}))
    return EXIT_OK


def _feature_inputs(path):
    path = Path(path)
    if path.is_dir():
        return load_features_dir(path)
    return [read_feature_file(path)]


def cmd_generate(args) -> int:
    state = load_checkpoint(args.checkpoint)
    items = _feature_inputs(args.features)
    lines = []
    if state.cfg.arch == "ar":
        for vid, mat in items:
            seq = ar_decode_baseline(torch.from_numpy(mat), state.model, state.vocab)
            lines.append({"video_id": vid, "caption": to_text(seq, state.vocab)})
    else:
        sched = schedule_for(state.cfg)
        plan = make_plan(args.steps, state.cfg.T, args.eta)
        for i, (vid, mat) in enumerate(items):
            seq = generate(torch.from_numpy(mat), state.model, sched, plan,
                           RngState(args.seed, stream=i), state.vocab)
            lines.append({"video_id": vid, "caption": to_text(seq, state.vocab)})
    text = "".join(json.dumps(line) + "\n" for line in lines)
    Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = corpus_from_files(args.hyp, args.ref)
    print(json.dumps(evaluate(corpus)))
    return EXIT_OK


def cmd_bench(args) -> int:
    nar = load_checkpoint(args.checkpoint)
    ar = load_checkpoint(args.ar_checkpoint)
    if nar.cfg.arch != "nar" or ar.cfg.arch != "ar":
        raise DiffCapError("bench needs a NAR checkpoint and an AR checkpoint, in that order")
    data = load_dataset(args.features, args.captions, nar.vocab, nar.cfg.n_v)
    lengths = [int(x) for x in args.lengths.split(",")]
    rows = run_bench(nar, ar, data, lengths, repeats=args.repeats, n_steps=args.steps,
                     seed=args.seed, max_items=args.max_items)
    write_bench_csv(args.out, rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic feature/caption corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-examples", type=int, default=500)
    s.add_argument("--n-objects", type=int, default=8)
    s.add_argument("--n-actions", type=int, default=8)
    s.add_argument("--n-scenes", type=int, default=8)
    s.add_argument("--d-f", type=int, default=32)
    s.add_argument("--noise-std", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--min-len", type=int)
    s.add_argument("--max-len", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--features")
    t.add_argument("--captions")
    t.add_argument("--out-dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--arch", choices=["nar", "ar"])
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="caption feature files")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--features", required=True, help="feature file or directory")
    g.add_argument("--out", required=True)
    g.add_argument("--steps", type=int, default=20)
    g.add_argument("--eta", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score hypotheses against references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="latency/quality versus caption length")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--ar-checkpoint", required=True)
    b.add_argument("--features", required=True)
    b.add_argument("--captions", required=True)
    b.add_argument("--lengths", default="5,10,15,20")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--steps", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--max-items", type=int)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_threads()
    try:
        return args.func(args)
    except (NumericGuardError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DiffCapError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
