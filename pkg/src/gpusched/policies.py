"""Baseline priority functions.  Every score is "higher schedules first".

The classic formulas mix minimised and maximised forms; each is converted
here with the transform noted beside it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

SLURM_WEIGHT = 1000.0
SLURM_MAX_AGE = 7 * 86400.0
WEEK = 7 * 86400.0


class PolicyKind(str, Enum):
    FIFO = "fifo"
    SJF = "sjf"
    WFP3 = "wfp3"
    UNICEP = "unicep"
    F1 = "f1"
    SLURM_MF = "slurm"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        for k in cls:
            if key in (k.value, k.name.lower()):
                return k
        raise ValueError(f"unknown policy {name!r}")


@dataclass
class PriorityContext:
    now: float = 0.0
    user_usage: dict = field(default_factory=dict)  # user_id -> GPU-seconds consumed
    total_gpus: int = 1
    use_actual_runtime: bool = False


def score_arrays(kind, submit, rt, nt, now, usage=None, total_gpus=1):
    """Vectorised priority scores over a queue.

    ``submit``, ``rt`` (runtime as observed by the policy) and ``nt``
    (requested GPUs) are equal-length arrays; ``usage`` holds each job's
    user GPU-seconds (SLURM_MF only).
    """
    kind = PolicyKind.parse(kind)
    submit = np.asarray(submit, dtype=np.float64)
    rt = np.maximum(np.asarray(rt, dtype=np.float64), 1.0)
    nt = np.asarray(nt, dtype=np.float64)
    wt = np.maximum(now - submit, 0.0)
    if kind is PolicyKind.FIFO:
        return -submit
    if kind is PolicyKind.SJF:
        return -rt
    if kind is PolicyKind.WFP3:
        # table form -(wt/rt)^3 * nt is an ascending sort key; negate it
        return (wt / rt) ** 3 * nt
    if kind is PolicyKind.UNICEP:
        # log2(1) = 0 would divide by zero; single-GPU jobs use log2(2)
        return wt / (np.log2(np.maximum(nt, 2.0)) * rt)
    if kind is PolicyKind.F1:
        # F1 is minimised; st = 0 is guarded to log10(1)
        return -(np.log10(rt) * nt + 870.0 * np.log10(np.maximum(submit, 1.0)))
    if kind is PolicyKind.SLURM_MF:
        age = np.minimum(wt / SLURM_MAX_AGE, 1.0)
        usage = np.zeros_like(submit) if usage is None else np.asarray(usage, dtype=np.float64)
        half_decay = max(total_gpus, 1) * WEEK
        fairshare = np.exp2(-usage / half_decay)
        lo, hi = rt.min(), rt.max()
        attr = 1.0 - ((rt - lo) / (hi - lo) if hi > lo else np.zeros_like(rt))
        partition = qos = 1.0
        return SLURM_WEIGHT * (age + fairshare + attr + partition + qos)
    raise ValueError(kind)


def _runtime(job, ctx):
    return job.actual_runtime if ctx.use_actual_runtime else job.requested_time


def scores(kind, jobs, ctx: PriorityContext) -> np.ndarray:
    return score_arrays(
        kind,
        [j.submit_time for j in jobs],
        [_runtime(j, ctx) for j in jobs],
        [j.requested_gpus for j in jobs],
        ctx.now,
        [ctx.user_usage.get(j.user_id, 0.0) for j in jobs],
        ctx.total_gpus,
    )


def priority(kind, job, ctx: PriorityContext, queue=None) -> float:
    """Score of one job; SLURM_MF normalises its job attribute over ``queue``."""
    queue = list(queue) if queue else [job]
    if job not in queue:
        queue.append(job)
    return float(scores(kind, queue, ctx)[queue.index(job)])


def rank(kind, queue, ctx: PriorityContext) -> list:
    """Queue in schedule order: descending score, then earlier submit, then job_id."""
    queue = list(queue)
    s = scores(kind, queue, ctx)
    order = sorted(range(len(queue)),
                   key=lambda i: (-s[i], queue[i].submit_time, queue[i].job_id))
    return [queue[i] for i in order]


# -- externally supplied priorities (e.g. a published per-job prediction file)

def load_priority_file(path) -> dict:
    """Read a ``job_id,priority`` CSV (header optional)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "job_id":
                continue
            out[row[0].strip()] = float(row[1])
    return out


def rank_external(queue, priorities: dict) -> list:
    """Order by supplied priority; jobs missing from the file go last in FIFO order."""
    return sorted(queue, key=lambda j: (-priorities.get(j.job_id, -math.inf),
                                        j.submit_time, j.job_id))
