#!/usr/bin/env python3
"""Train one checkpoint per base policy, then evaluate every checkpoint against every policy.

Rows are the policy trained against, columns the policy evaluated against;
cells are the wait-time improvement in percent.  ``--fifo-checkpoint`` reuses
an existing FIFO checkpoint (e.g. from learning_signal.py) instead of training one.

    python scripts/transfer_matrix.py --fifo-checkpoint results/learning/checkpoint.json
"""

import argparse

from gpusched.agent import load_checkpoint
from gpusched.experiments import TRANSFER_POLICIES, DeskSetup, train_agent, transfer_matrix
from gpusched.io import atomic_write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--fifo-checkpoint")
    ap.add_argument("--epochs", type=int, default=2)
    ap.add_argument("--batches", type=int, default=10)
    ap.add_argument("--runs", type=int, default=3)
    ap.add_argument("--out", default="results/transfer.csv")
    args = ap.parse_args()

    train_part, test_part, spec = DeskSetup().build()
    checkpoints = {}
    for pol in TRANSFER_POLICIES:
        if pol == "fifo" and args.fifo_checkpoint:
            checkpoints[pol], _ = load_checkpoint(args.fifo_checkpoint)
        else:
            checkpoints[pol], _, _ = train_agent(train_part, spec, pol, "wait", args.epochs, args.batches)
    m = transfer_matrix(checkpoints, test_part, spec, runs=args.runs)
    print("trained\\tested " + " ".join(f"{p:>8}" for p in TRANSFER_POLICIES))
    for pol, row in zip(TRANSFER_POLICIES, m):
        print(f"{pol:>14} " + " ".join(f"{v:+8.1f}" for v in row))
    atomic_write_csv(args.out, ["trained_on", *TRANSFER_POLICIES],
                     [[pol, *map(float, row)] for pol, row in zip(TRANSFER_POLICIES, m)])


if __name__ == "__main__":
    main()
