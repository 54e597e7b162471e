"""Train the default model on the template synthetic corpus and report caption
quality every few epochs.

    python3 scripts/train_synthetic.py --out runs/synthetic --epochs 80
"""
import argparse
import json
import time
from pathlib import Path

from diffcap.config import TrainConfig
from diffcap.data import SyntheticSpec, generate_synthetic, load_dataset
from diffcap.numkernel import configure_threads
from diffcap.pipeline import caption_dataset, default_plan, score_captions
from diffcap.training import init_state, save_checkpoint, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/synthetic")
    p.add_argument("--n-examples", type=int, default=500)
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--epochs", type=int, default=80)
    p.add_argument("--n-v", type=int, default=20)
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    configure_threads()

    out = Path(args.out)
    spec = SyntheticSpec(n_examples=args.n_examples, noise_std=args.noise_std, seed=args.seed)
    features, captions = generate_synthetic(spec, out / "data")
    cfg = TrainConfig(n_v=args.n_v, epochs=args.epochs, seed=args.seed, out_dir=str(out))
    data = load_dataset(features, captions, n_v=cfg.n_v)
    state = init_state(cfg, data.vocab, data.d_f)
    plan = default_plan(cfg.T, cfg.n_steps)
    t0 = time.perf_counter()

    def on_epoch(s):
        if s.epoch % args.eval_every:
            return
        scores = score_captions(caption_dataset(s.model, data, s.sched, plan), data.references())
        scores.update(epoch=s.epoch, minutes=round((time.perf_counter() - t0) / 60, 2),
                      loss=s.history[-1]["loss_total"])
        print(json.dumps(scores), flush=True)

    train(state, data, log_path=out / "train_log.csv", ckpt_path=out / "model.ckpt",
          on_epoch=on_epoch)
    save_checkpoint(out / "model.ckpt", state)


if __name__ == "__main__":
    main()
