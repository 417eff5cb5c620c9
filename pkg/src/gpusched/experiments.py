"""Desk-scale experiment drivers shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .agent import ActorCritic, PpoHyper, TrainConfig, epoch_means, evaluate, train
from .cluster import ClusterSpec, parse_node_groups
from .sim import measure_overhead
from .trace import GenConfig, TraceSet, split_trace, synthesize_trace

TRANSFER_POLICIES = ("fifo", "sjf", "f1", "wfp3")


@dataclass
class DeskSetup:
    """A congested synthetic workload on a small homogeneous cluster."""

    gen: GenConfig = field(default_factory=lambda: GenConfig(
        job_count=10_000, arrival_rate=0.014, runtime_mean=3600.0, runtime_sigma=1.2,
        estimate_noise=(1.0, 1.0), seed=11))
    nodes: str = "8 x V100:8:64:512"
    train_fraction: float = 0.9

    def build(self):
        """(train trace, held-out trace, cluster spec)."""
        trace = synthesize_trace(self.gen)
        train_part, test_part = split_trace(trace, self.train_fraction)
        return train_part, test_part, parse_node_groups(self.nodes)


def train_agent(train_part: TraceSet, spec: ClusterSpec, base_policy="fifo", metric="wait",
                epochs=20, batches=20, batch_size=256, pi_lr=1e-3, seed=0, naive=False):
    cfg = TrainConfig(train_part, spec, base_policy, metric, epochs=epochs,
                      batches_per_epoch=batches, batch_size=batch_size,
                      hyper=PpoHyper(pi_lr=pi_lr), seed=seed, naive=naive)
    t0 = time.perf_counter()
    params, curve = train(cfg)
    return params, curve, time.perf_counter() - t0


def learning_signal(setup: DeskSetup, epochs=20, batches=20, batch_size=256, pi_lr=1e-3, seed=0,
                    eval_runs=10, eval_batch=256):
    """Train against FIFO on wait time, then evaluate greedily on held-out windows."""
    train_part, test_part, spec = setup.build()
    params, curve, elapsed = train_agent(train_part, spec, "fifo", "wait", epochs, batches,
                                         batch_size, pi_lr, seed)
    means = epoch_means(curve)
    report = evaluate(params, test_part, spec, "fifo", "wait", runs=eval_runs,
                      batch_size=eval_batch, seed=seed)
    return {"params": params, "curve": curve, "epoch_means": means,
            "final_mean_reward": float(np.mean(means[-5:])),
            "wait_reduction_pct": report["mean"]["improvement"]["wait"],
            "report": report, "train_s": elapsed}


def ablation(setup: DeskSetup, seeds=range(5), epochs=4, batches=10, batch_size=256, pi_lr=1e-3,
             base_policy="slurm", metric="bsld", eval_runs=5, eval_batch=256):
    """Pro (engineered features + allocator) vs naive (raw features, canonical placement)."""
    train_part, test_part, spec = setup.build()
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for arm, naive in (("pro", False), ("naive", True)):
            params, _, _ = train_agent(train_part, spec, base_policy, metric, epochs, batches,
                                       batch_size, pi_lr, seed, naive)
            rep = evaluate(params, test_part, spec, base_policy, metric, runs=eval_runs,
                           batch_size=eval_batch, seed=seed)
            row[arm] = rep["mean"]["rl"]["bsld"]
            row["base"] = rep["mean"]["base"]["bsld"]
        row["pro_wins"] = row["pro"] <= row["naive"]
        rows.append(row)
    return rows


def transfer_matrix(checkpoints: dict, test_part: TraceSet, spec: ClusterSpec, metric="wait",
                    runs=3, batch_size=256, seed=0, policies=TRANSFER_POLICIES):
    """Improvement (%) of each checkpoint (rows: trained-on) against each base policy (columns)."""
    matrix = np.zeros((len(policies), len(policies)))
    for r, trained_on in enumerate(policies):
        for c, tested_on in enumerate(policies):
            rep = evaluate(checkpoints[trained_on], test_part, spec, tested_on, metric, runs=runs,
                           batch_size=batch_size, seed=seed)
            matrix[r, c] = rep["mean"]["improvement"][metric]
    return matrix


def overhead(params, spec: ClusterSpec, sizes=(128, 256, 512, 1024), repeats=7, seed=0):
    rows = measure_overhead(list(sizes), ActorCritic(params), spec, seed=seed, repeats=repeats,
                            naive=params.naive)
    growth = [b["decision_s"] / a["decision_s"] for a, b in zip(rows, rows[1:])]
    return rows, growth
