"""Per-job and aggregate scheduling metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_TAU = 10.0
METRICS = ("wait", "jct", "bsld", "utilization")


@dataclass(frozen=True)
class JobOutcome:
    job_id: str
    submit_time: int
    start_time: int
    end_time: int
    gpus_used: int

    def __post_init__(self):
        if not self.submit_time <= self.start_time <= self.end_time:
            raise ValueError(f"{self.job_id}: need submit <= start <= end")

    @property
    def runtime(self):
        return self.end_time - self.start_time


@dataclass
class UtilizationTimeline:
    """Step function: ``allocated`` GPUs hold from each timestamp to the next."""

    points: list = field(default_factory=list)  # [(timestamp, allocated_gpus)]
    total_gpus: int = 1

    def record(self, t, allocated):
        if self.points and self.points[-1][0] == t:
            self.points[-1] = (t, allocated)
        else:
            if self.points and t < self.points[-1][0]:
                raise ValueError("timeline timestamps must increase")
            self.points.append((t, allocated))


def wait_time(o: JobOutcome):
    return o.start_time - o.submit_time


def jct(o: JobOutcome):
    return o.end_time - o.submit_time


def bsld(o: JobOutcome, tau=DEFAULT_TAU):
    if not tau > 0:
        raise ValueError("tau must be positive")
    run = o.end_time - o.start_time
    return max((wait_time(o) + run) / max(run, tau), 1.0)


def utilization(tl: UtilizationTimeline, horizon) -> float:
    """Time-weighted mean of allocated/total over ``horizon = (start, end)``."""
    start, end = horizon
    if not end > start:
        raise ValueError("empty horizon")
    if not tl.points or start < tl.points[0][0]:
        raise ValueError("horizon starts before the timeline")
    ts = np.array([p[0] for p in tl.points], dtype=np.float64)
    vals = np.array([p[1] for p in tl.points], dtype=np.float64)
    # segment boundaries clipped to the horizon; last value persists
    seg_start = np.clip(ts, start, end)
    seg_end = np.clip(np.append(ts[1:], np.inf), start, end)
    area = float(np.sum(vals * (seg_end - seg_start)))
    return area / ((end - start) * tl.total_gpus)


def per_job(outcomes, metric, tau=DEFAULT_TAU) -> np.ndarray:
    if metric == "wait":
        return np.array([wait_time(o) for o in outcomes], dtype=np.float64)
    if metric == "jct":
        return np.array([jct(o) for o in outcomes], dtype=np.float64)
    if metric == "bsld":
        return np.array([bsld(o, tau) for o in outcomes], dtype=np.float64)
    raise ValueError(f"no per-job form for metric {metric!r}")


def episode_horizon(outcomes):
    return (min(o.submit_time for o in outcomes), max(o.end_time for o in outcomes))


def aggregate_score(outcomes, metric, tau=DEFAULT_TAU, timeline=None) -> float:
    """Sum of per-job scores; for utilization the timeline mean over the episode."""
    if not outcomes:
        raise ValueError("no outcomes to aggregate")
    if metric == "utilization":
        if timeline is None:
            raise ValueError("utilization needs a timeline")
        return utilization(timeline, episode_horizon(outcomes))
    return float(per_job(outcomes, metric, tau).sum())


def summarize(outcomes, timeline=None, tau=DEFAULT_TAU) -> dict:
    """Mean wait/JCT/BSLD per job plus utilization (when a timeline is given)."""
    out = {m: float(per_job(outcomes, m, tau).mean()) for m in ("wait", "jct", "bsld")}
    if timeline is not None:
        out["utilization"] = utilization(timeline, episode_horizon(outcomes))
    return out


def write_outcomes_csv(outcomes, path, tau=DEFAULT_TAU):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["job_id", "submit", "start", "end", "wait", "jct", "bsld"])
        for o in outcomes:
            w.writerow([o.job_id, o.submit_time, o.start_time, o.end_time,
                        wait_time(o), jct(o), repr(bsld(o, tau))])


def aggregates_json(outcomes, timeline=None, tau=DEFAULT_TAU) -> str:
    rec = {m: aggregate_score(outcomes, m, tau) for m in ("wait", "jct", "bsld")}
    if timeline is not None:
        rec["utilization"] = aggregate_score(outcomes, "utilization", tau, timeline)
    return json.dumps(rec, sort_keys=True)
