#!/usr/bin/env python3
"""Engineered features + allocator versus raw features + canonical placement, per seed.

Both arms get the same training budget and are evaluated on the same held-out
windows against the multifactor base policy on bounded slowdown.

    python scripts/ablation.py --seeds 0 1 2 3 4 --out results/ablation.csv
"""

import argparse

from gpusched.experiments import DeskSetup, ablation
from gpusched.io import atomic_write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=4)
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--eval-runs", type=int, default=5)
    ap.add_argument("--out", default="results/ablation.csv")
    args = ap.parse_args()

    rows = ablation(DeskSetup(), args.seeds, args.epochs, args.batches, eval_runs=args.eval_runs)
    for r in rows:
        print(f"seed {r['seed']}: base {r['base']:.3f}  pro {r['pro']:.3f}  naive {r['naive']:.3f}"
              f"  {'pro wins' if r['pro_wins'] else 'naive wins'}")
    print(f"pro <= naive in {sum(r['pro_wins'] for r in rows)}/{len(rows)} seeds")
    fields = ["seed", "base", "pro", "naive", "pro_wins"]
    atomic_write_csv(args.out, fields, [[r[f] for f in fields] for r in rows])


if __name__ == "__main__":
    main()
