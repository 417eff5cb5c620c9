#!/usr/bin/env python3
"""Decision latency versus queue size, with the growth factor per doubling."""

import argparse

from gpusched.agent import init_agent, load_checkpoint
from gpusched.cluster import parse_node_groups
from gpusched.experiments import overhead
from gpusched.io import atomic_write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint")
    ap.add_argument("--nodes", default="8 x V100:8:64:512")
    ap.add_argument("--sizes", default="128,256,512,1024")
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--out", default="results/overhead.json")
    args = ap.parse_args()

    params = load_checkpoint(args.checkpoint)[0] if args.checkpoint else init_agent(0)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows, growth = overhead(params, parse_node_groups(args.nodes), sizes, args.repeats)
    for r, g in zip(rows, [None, *growth]):
        print(f"{r['queue_size']:5d} jobs: {1e3 * r['decision_s']:7.2f} ms" + (f"  x{g:.2f}" if g else ""))
    atomic_write_json(args.out, {"rows": rows, "growth": growth})


if __name__ == "__main__":
    main()
