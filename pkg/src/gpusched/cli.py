"""Command-line entry point: ``gpusched <command> [flags]``.

Exit codes: 0 success, 2 configuration/usage error, 3 data error (trace,
checkpoint or report files), 4 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .agent import (
    CURVE_FIELDS, ActorCritic, CheckpointError, TrainConfig, evaluate, init_agent, load_checkpoint,
    save_checkpoint, train,
)
from .features import LAYOUT_VERSION, dump_state
from .io import atomic_write_csv, atomic_write_json, atomic_write_text
from .metrics import METRICS
from .policies import PolicyKind
from .sim import Engine, SimConfig, UnschedulableJob, measure_overhead
from .trace import TraceError, TraceSet, load_trace, save_trace, split_trace, synthesize_trace

log = logging.getLogger("gpusched")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class DataError(Exception):
    pass


# -- shared helpers -------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="INI config file (flags override it)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def _trace_flags(p):
    p.add_argument("--trace", dest="trace_path", help="trace file (default: synthesize one)")
    p.add_argument("--format", dest="trace_format",
                   choices=["canonical", "philly", "helios", "alibaba"])
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--nodes", help='node groups, e.g. "8 x V100:8:64:512", or "helios"')


def _sim_flags(p):
    p.add_argument("--base-policy", choices=[k.value for k in PolicyKind])
    p.add_argument("--metric", choices=list(METRICS))
    p.add_argument("-k", "--lookahead", dest="k", type=int)
    p.add_argument("--no-backfill", dest="backfill", action="store_const", const=False)


def _overrides(args, names):
    return {n: getattr(args, n, None) for n in names}


def _load_config(args, names):
    return cfgmod.load(getattr(args, "config", None), _overrides(args, names))


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _trace_of(cfg: cfgmod.RunConfig):
    """Full trace plus a provenance label (file hash, or generator settings hash)."""
    if cfg.trace_path:
        trace = load_trace(cfg.trace_path, cfg.trace_format)
        if trace.dropped:
            log.warning("dropped %d invalid rows from %s", trace.dropped, cfg.trace_path)
        return trace, _sha256(cfg.trace_path)
    gen = cfg.gen_config()
    trace = synthesize_trace(gen)
    sections = cfgmod.SECTIONS["generate"]
    label = json.dumps({n: getattr(cfg, n) for n in sections}, sort_keys=True)
    return trace, "synthetic:" + hashlib.sha256(label.encode()).hexdigest()


def _split(trace: TraceSet, fraction):
    if fraction >= 1.0:
        return trace, trace
    return split_trace(trace, fraction)


# -- gen-trace ----------------------------------------------------------------------------

GEN_FLAGS = ("job_count", "arrival_rate", "runtime_mean", "runtime_sigma", "gpu_demand_weights",
             "gpu_type_mix", "vc_mix", "estimate_noise", "users", "gen_seed")


def cmd_gen_trace(args):
    if args.job_count is not None and args.job_count < 1:
        raise cfgmod.ConfigError("--jobs must be at least 1")
    if args.seed is not None:
        args.gen_seed = args.seed
    cfg = _load_config(args, GEN_FLAGS)
    trace = synthesize_trace(cfg.gen_config())
    save_trace(trace, args.out)
    log.info("wrote %d jobs to %s", len(trace), args.out)


# -- train ----------------------------------------------------------------------------------

TRAIN_FLAGS = ("trace_path", "trace_format", "train_fraction", "nodes", "base_policy", "metric", "k",
               "backfill", "epochs", "batches", "batch_size", "naive", "seed", "pi_lr", "vf_lr",
               "runtime_source")


def cmd_train(args):
    cfg = _load_config(args, TRAIN_FLAGS)
    out = Path(args.out or Path(cfg.out_dir) / "train")
    out.mkdir(parents=True, exist_ok=True)
    trace, provenance = _trace_of(cfg)
    train_part, _ = _split(trace, cfg.train_fraction)
    if cfg.batch_size > len(train_part):
        raise DataError(f"batch size {cfg.batch_size} exceeds {len(train_part)} training jobs")
    tc = TrainConfig(train_part, cfg.cluster_spec(), cfg.base_policy, cfg.metric, cfg.epochs,
                     cfg.batches, cfg.batch_size, cfg.hyper(), cfg.seed, cfg.naive,
                     cfg.allocator_flag(), cfg.k, cfg.backfill, cfg.runtime_source, cfg.tau)

    params, start, curve = None, (0, 0), []
    if args.resume:
        params, meta = load_checkpoint(args.resume, LAYOUT_VERSION[cfg.naive])
        start = tuple(meta.get("next", (0, 0)))
        curve_path = Path(args.resume).with_name("curve.csv")
        if curve_path.exists():
            with open(curve_path, encoding="utf-8") as fh:
                curve = [_curve_row(r) for r in csv.DictReader(fh)]
        log.info("resuming at epoch %d batch %d", *start)

    meta = {"base_policy": tc.base_policy.value, "metric": cfg.metric, "trace": provenance,
            "seed": cfg.seed}
    t0 = time.perf_counter()

    def progress(row, p):
        curve.append(row)
        if row["batch"] == cfg.batches - 1:
            log.info("epoch %d mean reward %.4f", row["epoch"],
                     np.mean([r["reward"] for r in curve if r["epoch"] == row["epoch"]]))
            nxt = (row["epoch"] + 1, 0)
            save_checkpoint(p, out / "checkpoint.json", {**meta, "next": list(nxt)})
            _write_curve(out / "curve.csv", curve)

    params, _ = train(tc, params, start, progress)
    save_checkpoint(params, out / "checkpoint.json", {**meta, "next": [cfg.epochs, 0]})
    _write_curve(out / "curve.csv", curve)
    atomic_write_text(out / "config.ini", cfg.to_ini())
    atomic_write_json(out / "timing.json", {"elapsed_s": time.perf_counter() - t0})
    log.info("wrote %s", out)


def _curve_row(r):
    row = {k: float(r[k]) for k in CURVE_FIELDS}
    for k in ("epoch", "batch", "decisions"):
        row[k] = int(row[k])
    return row


def _write_curve(path, curve):
    atomic_write_csv(path, CURVE_FIELDS, [[r[k] for k in CURVE_FIELDS] for r in curve])


# -- eval -------------------------------------------------------------------------------------

EVAL_FLAGS = ("trace_path", "trace_format", "train_fraction", "nodes", "base_policy", "metric", "k",
              "backfill", "runs", "eval_batch", "eval_seed")


def cmd_eval(args):
    cfg = _load_config(args, EVAL_FLAGS)
    params, meta = load_checkpoint(args.checkpoint)
    trace, provenance = _trace_of(cfg)
    _, test_part = _split(trace, cfg.train_fraction)
    report = evaluate(params, test_part, cfg.cluster_spec(), cfg.base_policy, cfg.metric,
                      cfg.runs, cfg.eval_batch, cfg.eval_seed, cfg.k, cfg.backfill, cfg.tau,
                      cfg.allocator_flag(), cfg.eval_runtime_source)
    report["trace"] = provenance
    report["train_fraction"] = cfg.train_fraction
    report["checkpoint"] = {"sha256": _sha256(args.checkpoint),
                            "trained_against": meta.get("base_policy")}
    out = Path(args.out or Path(cfg.out_dir) / f"eval_{cfg.base_policy}")
    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out.with_suffix(".json"), report)
    header = ["run", "batch_seed", "first_job"] + [f"{side}_{m}" for side in ("base", "rl")
                                                   for m in METRICS]
    rows = [[r["run"], r["batch_seed"], r["first_job"]] + [r[side][m] for side in ("base", "rl")
                                                           for m in METRICS]
            for r in report["per_run"]]
    atomic_write_csv(out.with_suffix(".csv"), header, rows)
    imp = report["mean"]["improvement"]
    print(f"{report['base_policy']}: " + ", ".join(f"{m} {imp[m]:+.2f}%" for m in METRICS))


# -- compare -------------------------------------------------------------------------------------

def _read_report(path):
    try:
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        rep["mean"]["base"], rep["mean"]["rl"], rep["trace"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"not an evaluation report: {path} ({exc})") from exc
    return rep


def compare_rows(reports, names):
    """Table rows (policy, bsld, wait, jct, utilization, time, delta%) for reports on one trace."""
    first = reports[0]
    for rep, name in zip(reports[1:], names[1:]):
        for key in ("trace", "seed", "batch_size", "runs"):
            if rep.get(key) != first.get(key):
                raise DataError(f"{name}: {key} differs from {names[0]}; reports are not comparable")
    metric = first["metric"]
    rows, seen = [], set()
    stems = [Path(n).stem for n in names]
    for rep, stem in zip(reports, stems):
        pol = rep["base_policy"].upper()
        timing = rep.get("timing", {})
        candidates = [(pol, rep["mean"]["base"], timing.get("base_s"))]
        label = f"RL-{pol}" if sum(r["base_policy"] == rep["base_policy"] for r in reports) == 1 \
            else f"RL-{pol} ({stem})"
        candidates.append((label, rep["mean"]["rl"], timing.get("rl_s")))
        for name, m, t in candidates:
            if name in seen:
                continue
            seen.add(name)
            rows.append({"policy": name, **{k: m[k] for k in METRICS}, "time_s": t})
    ref = rows[0][metric]
    for r in rows:
        v = r[metric]
        if metric == "utilization":
            r["delta_pct"] = 100.0 * (v - ref) / ref if ref else 0.0
        else:
            r["delta_pct"] = 100.0 * (ref - v) / ref if ref else 0.0
    return rows, metric


def cmd_compare(args):
    reports = [_read_report(p) for p in args.reports]
    rows, metric = compare_rows(reports, args.reports)
    header = ["Policy", "BSLD", "Wait", "JCT", "Util", "Time(s)", f"Δ{metric}%"]
    lines = [" | ".join(header)]
    for r in rows:
        t = "" if r["time_s"] is None else f"{r['time_s']:.2f}"
        lines.append(" | ".join([r["policy"], f"{r['bsld']:.3f}", f"{r['wait']:.1f}",
                                 f"{r['jct']:.1f}", f"{r['utilization']:.4f}", t,
                                 f"{r['delta_pct']:+.2f}"]))
    print("\n".join(lines))
    if args.out:
        fields = ["policy", "bsld", "wait", "jct", "utilization", "time_s", "delta_pct"]
        atomic_write_csv(args.out, fields, [[r[f] for f in fields] for r in rows])


# -- inspect-state ----------------------------------------------------------------------------------

def cmd_inspect_state(args):
    cfg = _load_config(args, ("trace_path", "trace_format", "nodes", "base_policy", "seed"))
    trace, _ = _trace_of(cfg)
    jobs = list(trace.jobs[:args.jobs]) if args.jobs else list(trace.jobs)
    eng = Engine(jobs, cfg.cluster_spec(), SimConfig(policy=cfg.base_policy, seed=cfg.seed))
    eng.advance(args.at)
    queue = [eng.jobs[i] for i in eng.queue]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_state(queue, eng.state, eng.now, out / "features.csv", out / "state.csv",
               naive=args.naive)
    print(f"t={eng.now} queued={len(queue)} running={len(eng.running)} -> {out}")


# -- bench-overhead ------------------------------------------------------------------------------------

def cmd_bench_overhead(args):
    cfg = _load_config(args, ("nodes", "seed", "k"))
    if args.checkpoint:
        params, _ = load_checkpoint(args.checkpoint)
    else:
        params = init_agent(cfg.seed)
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = measure_overhead(sizes, ActorCritic(params), cfg.cluster_spec(), cfg.seed, args.repeats,
                            params.naive, cfg.k, args.batch)
    for prev, cur in zip(rows, rows[1:]):
        cur["growth"] = cur["decision_s"] / prev["decision_s"]
    for r in rows:
        print(f"queue {r['queue_size']:5d}: {1e3 * r['decision_s']:8.2f} ms/decision"
              + (f"  x{r['growth']:.2f}" if "growth" in r else ""))
    if args.out:
        atomic_write_json(args.out, {"rows": rows})


# -- entry point --------------------------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="gpusched", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="write a synthetic trace as canonical CSV")
    _common(g)
    g.add_argument("--jobs", dest="job_count", type=int)
    g.add_argument("--rate", dest="arrival_rate", type=float, help="arrivals per second")
    g.add_argument("--runtime-mean", type=float)
    g.add_argument("--runtime-sigma", type=float)
    g.add_argument("--gpu-weights", dest="gpu_demand_weights", help="weights over 1,2,4,8,16 GPUs")
    g.add_argument("--gpu-types", dest="gpu_type_mix", help='e.g. "V100:0.7,P100:0.3"')
    g.add_argument("--vcs", dest="vc_mix")
    g.add_argument("--estimate-noise", help="low,high multiplier on the actual runtime")
    g.add_argument("--users", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_trace, gen_seed=None)

    t = sub.add_parser("train", help="train the prioritiser against a base policy")
    _common(t)
    _trace_flags(t)
    _sim_flags(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batches", type=int, help="batches per epoch")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--naive", action="store_const", const=True, help="raw-feature ablation arm")
    t.add_argument("--pi-lr", type=float)
    t.add_argument("--vf-lr", type=float)
    t.add_argument("--runtime-source", choices=["actual", "requested"])
    t.add_argument("--resume", help="checkpoint written by an earlier run")
    t.add_argument("--out", help="output directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="paired greedy evaluation of a checkpoint")
    _common(e)
    _trace_flags(e)
    _sim_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--runs", type=int)
    e.add_argument("--batch", dest="eval_batch", type=int)
    e.add_argument("--out", help="report path prefix (.json and .csv are written)")
    e.set_defaults(func=cmd_eval, eval_seed=None)

    c = sub.add_parser("compare", help="tabulate evaluation reports from one trace")
    c.add_argument("reports", nargs="+")
    c.add_argument("--out", help="CSV copy of the table")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("inspect-state", help="dump the feature table and state matrix at a time")
    _common(s)
    _trace_flags(s)
    s.add_argument("--base-policy", choices=[k.value for k in PolicyKind])
    s.add_argument("--at", type=int, required=True, help="simulation time in seconds")
    s.add_argument("--jobs", type=int, help="use only the first N jobs")
    s.add_argument("--naive", action="store_true")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_inspect_state)

    b = sub.add_parser("bench-overhead", help="decision latency against queue size")
    _common(b)
    b.add_argument("--nodes")
    b.add_argument("--checkpoint")
    b.add_argument("--sizes", default="128,256,512,1024")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("-k", "--lookahead", dest="k", type=int)
    b.add_argument("--batch", action="store_true", help="also time a whole episode per size")
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench_overhead)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "eval" and args.seed is not None and args.eval_seed is None:
        args.eval_seed = args.seed
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except cfgmod.ConfigError as exc:
        ap.print_usage(sys.stderr)
        print(f"gpusched: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, CheckpointError, DataError, OSError) as exc:
        print(f"gpusched: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UnschedulableJob, RuntimeError, ValueError) as exc:
        print(f"gpusched: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
