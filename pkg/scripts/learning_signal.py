#!/usr/bin/env python3
"""Train against FIFO on wait time and report the curve plus a held-out greedy evaluation.

    python scripts/learning_signal.py --epochs 20 --batches 20 --out results/learning
"""

import argparse
import json
from pathlib import Path

from gpusched.agent import save_checkpoint
from gpusched.experiments import DeskSetup, learning_signal
from gpusched.io import atomic_write_csv, atomic_write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--batches", type=int, default=20)
    ap.add_argument("--batch-size", type=int, default=256)
    ap.add_argument("--pi-lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-runs", type=int, default=10)
    ap.add_argument("--out", default="results/learning")
    args = ap.parse_args()

    out = Path(args.out)
    res = learning_signal(DeskSetup(), args.epochs, args.batches, args.batch_size, args.pi_lr,
                          args.seed, args.eval_runs, args.batch_size)
    save_checkpoint(res["params"], out / "checkpoint.json",
                    meta={"base_policy": "fifo", "metric": "wait", "seed": args.seed})
    atomic_write_csv(out / "epoch_reward.csv", ["epoch", "mean_reward"],
                     list(enumerate(res["epoch_means"])))
    res["report"].pop("timing")
    atomic_write_json(out / "eval.json", res["report"])
    summary = {k: res[k] for k in ("final_mean_reward", "wait_reduction_pct", "train_s")}
    atomic_write_json(out / "summary.json", summary)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
