"""Job traces: canonical schema, source adapters, synthesis, splitting, batching.

The canonical on-disk form is a headered CSV whose columns are exactly the
:class:`JobRecord` field names.  Adapters for the public Philly, Helios and
Alibaba PAI traces are thin column-mapping shims (see ``ADAPTERS``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

GPU_DEMANDS = (1, 2, 4, 8, 16)
MISC = "MISC"


class TraceError(ValueError):
    """Raised for unreadable traces, empty traces and invalid generator configs."""


@dataclass(frozen=True)
class JobRecord:
    job_id: str
    user_id: str
    vc_id: str
    submit_time: int
    requested_time: int
    actual_runtime: int
    requested_gpus: int
    gpu_type: str
    requested_cpus: Optional[int] = None
    requested_mem_gb: Optional[float] = None

    def __post_init__(self):
        if self.submit_time < 0:
            raise TraceError(f"{self.job_id}: negative submit_time")
        if self.requested_time < 1 or self.actual_runtime < 1:
            raise TraceError(f"{self.job_id}: runtimes must be >= 1 s")
        if self.requested_gpus < 1:
            raise TraceError(f"{self.job_id}: requested_gpus must be >= 1")
        if self.requested_cpus is not None and self.requested_cpus < 1:
            raise TraceError(f"{self.job_id}: requested_cpus must be >= 1")
        if self.requested_mem_gb is not None and not self.requested_mem_gb > 0:
            raise TraceError(f"{self.job_id}: requested_mem_gb must be > 0")


FIELD_NAMES = [f.name for f in fields(JobRecord)]


@dataclass(frozen=True)
class TraceSet:
    jobs: tuple
    epoch: int = 0
    meta: dict = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        if not self.jobs:
            raise TraceError("trace has no jobs")
        seen = set()
        prev = -1
        for j in self.jobs:
            if j.job_id in seen:
                raise TraceError(f"duplicate job_id {j.job_id}")
            if j.submit_time < prev:
                raise TraceError("jobs not sorted by submit_time")
            seen.add(j.job_id)
            prev = j.submit_time

    def __len__(self):
        return len(self.jobs)


def _sorted_trace(jobs, epoch=0, meta=None, dropped=0):
    jobs = sorted(jobs, key=lambda j: (j.submit_time, j.job_id))
    return TraceSet(tuple(jobs), epoch=epoch, meta=dict(meta or {}), dropped=dropped)


# ---------------------------------------------------------------------------
# Adapters.  Each maps one raw CSV row (dict) to the keyword arguments of a
# JobRecord, with submit_time still absolute; None means "drop the row".

def _num(v):
    if v is None:
        return None
    v = str(v).strip()
    if v == "" or v.lower() in ("nan", "none", "null"):
        return None
    return float(v)


def _timestamp(v):
    """Seconds from an integer/float column or an ISO-like datetime string."""
    if v is None or str(v).strip() == "":
        return None
    try:
        return float(v)
    except ValueError:
        return datetime.fromisoformat(str(v).strip()).timestamp()


def _int_or_none(v):
    x = _num(v)
    return None if x is None else int(round(x))


def _canonical(row):
    mem = _num(row.get("requested_mem_gb"))
    return dict(
        job_id=row["job_id"],
        user_id=row.get("user_id", ""),
        vc_id=row.get("vc_id", ""),
        submit_time=_int_or_none(row["submit_time"]),
        requested_time=_int_or_none(row["requested_time"]),
        actual_runtime=_int_or_none(row["actual_runtime"]),
        requested_gpus=_int_or_none(row["requested_gpus"]),
        gpu_type=row.get("gpu_type") or MISC,
        requested_cpus=_int_or_none(row.get("requested_cpus")),
        requested_mem_gb=mem,
    )


def _philly(row):
    # job_id,user,vc,gpu_num,cpu_num,submit_time,duration[,time_limit,gpu_type]
    dur = _int_or_none(row.get("duration"))
    req = _int_or_none(row.get("time_limit")) or dur
    return dict(
        job_id=row["job_id"],
        user_id=row.get("user", ""),
        vc_id=row.get("vc", ""),
        submit_time=_timestamp(row.get("submit_time")),
        requested_time=req,
        actual_runtime=dur,
        requested_gpus=_int_or_none(row.get("gpu_num")),
        gpu_type=row.get("gpu_type") or "P100",
        requested_cpus=_int_or_none(row.get("cpu_num")),
        requested_mem_gb=_num(row.get("mem_gb")),
    )


def _helios(row):
    # job_id,user,vc,gpu_num,cpu_num,node_num,state,submit_time,start_time,end_time,duration
    d = _philly(row)
    d["gpu_type"] = row.get("gpu_type") or "V100"
    return d


def _alibaba(row):
    # job_name,user,start_time,end_time,plan_cpu,plan_mem,plan_gpu,gpu_type
    # plan_cpu and plan_gpu are percentages (100 == one unit).
    start, end = _timestamp(row.get("start_time")), _timestamp(row.get("end_time"))
    dur = None if start is None or end is None else int(round(end - start))
    gpu = _num(row.get("plan_gpu"))
    cpu = _num(row.get("plan_cpu"))
    return dict(
        job_id=row["job_name"],
        user_id=row.get("user", ""),
        vc_id=row.get("vc", ""),
        submit_time=start,
        requested_time=dur,
        actual_runtime=dur,
        requested_gpus=None if gpu is None else int(math.ceil(gpu / 100.0)),
        gpu_type=row.get("gpu_type") or MISC,
        requested_cpus=None if cpu is None or cpu <= 0 else int(math.ceil(cpu / 100.0)),
        requested_mem_gb=_num(row.get("plan_mem")),
    )


ADAPTERS: dict[str, Callable[[dict], dict]] = {
    "canonical": _canonical,
    "philly": _philly,
    "helios": _helios,
    "alibaba": _alibaba,
}

HELIOS_VCS = ("VC1", "VC2", "VC3", "VC4", "VC5")


def _helios_vc_map(labels):
    """Numeric labels 0-4 map directly; otherwise the five busiest VCs, by job count."""
    distinct = set(labels)
    if distinct <= {"0", "1", "2", "3", "4"}:
        return {str(i): HELIOS_VCS[i] for i in range(5)}
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = sorted(counts, key=lambda k: (-counts[k], k))[:5]
    return {lab: HELIOS_VCS[i] for i, lab in enumerate(top)}


def load_trace(path, format="canonical") -> TraceSet:
    """Read a trace CSV through the named adapter.

    Rows with missing mandatory fields or violating JobRecord invariants are
    dropped; the count is kept in ``TraceSet.dropped``.  Submit times are
    re-based so the earliest job arrives at 0 (the original origin is kept in
    ``epoch``).
    """
    if format not in ADAPTERS:
        raise TraceError(f"unknown trace format {format!r}")
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, UnicodeDecodeError, csv.Error) as exc:
        raise TraceError(f"cannot read {path}: {exc}") from exc

    adapter = ADAPTERS[format]
    vc_map = None
    if format == "helios":
        vc_map = _helios_vc_map([str(r.get("vc", "")).strip() for r in rows])

    parsed, dropped = [], 0
    for row in rows:
        try:
            kw = adapter(row)
        except (KeyError, ValueError, TypeError):
            dropped += 1
            continue
        if vc_map is not None:
            vc = vc_map.get(str(kw["vc_id"]).strip())
            if vc is None:
                dropped += 1
                continue
            kw["vc_id"] = vc
        mandatory = ("submit_time", "requested_time", "actual_runtime", "requested_gpus")
        if any(kw[k] is None for k in mandatory):
            dropped += 1
            continue
        parsed.append(kw)

    if not parsed:
        raise TraceError(f"{path}: no valid rows ({dropped} dropped)")
    epoch = int(math.floor(min(kw["submit_time"] for kw in parsed)))
    jobs = []
    for kw in parsed:
        kw["submit_time"] = int(round(kw["submit_time"] - epoch))
        kw["job_id"] = str(kw["job_id"])
        kw["user_id"] = str(kw["user_id"])
        kw["vc_id"] = str(kw["vc_id"])
        try:
            jobs.append(JobRecord(**kw))
        except TraceError:
            dropped += 1
    if not jobs:
        raise TraceError(f"{path}: no valid rows ({dropped} dropped)")
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise TraceError(f"{path}: duplicate job ids")
    return _sorted_trace(jobs, epoch=epoch, meta={"source": format, "path": str(path)},
                         dropped=dropped)


def save_trace(trace, path) -> None:
    """Write the canonical CSV form (empty cells for absent optional fields)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_NAMES)
        for j in trace.jobs:
            w.writerow(["" if getattr(j, n) is None else getattr(j, n) for n in FIELD_NAMES])


# ---------------------------------------------------------------------------
# Synthesis

@dataclass
class GenConfig:
    job_count: int = 1024
    arrival_rate: float = 0.0223
    runtime_mean: float = 3600.0
    runtime_sigma: float = 1.2
    gpu_demand_weights: tuple = (0.5, 0.2, 0.15, 0.1, 0.05)
    gpu_type_mix: dict = field(default_factory=lambda: {"V100": 1.0})
    vc_mix: dict = field(default_factory=lambda: {"default": 1.0})
    estimate_noise: tuple = (1.0, 1.0)
    users: int = 32
    max_runtime: int = 7 * 86400
    seed: int = 0

    def validate(self):
        if self.job_count < 1:
            raise TraceError("job_count must be positive")
        if not self.arrival_rate > 0:
            raise TraceError("arrival_rate must be > 0")
        if self.runtime_mean <= 0 or self.runtime_sigma < 0:
            raise TraceError("runtime distribution parameters must be non-negative")
        lo, hi = self.estimate_noise
        if lo <= 0 or hi < lo:
            raise TraceError("estimate_noise must be a range 0 < lo <= hi")
        if len(self.gpu_demand_weights) != len(GPU_DEMANDS):
            raise TraceError(f"gpu_demand_weights needs {len(GPU_DEMANDS)} entries")
        for name, w in (("gpu_demand_weights", list(self.gpu_demand_weights)),
                        ("gpu_type_mix", list(self.gpu_type_mix.values())),
                        ("vc_mix", list(self.vc_mix.values()))):
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise TraceError(f"{name} must be non-negative and sum to 1")
        if self.users < 1:
            raise TraceError("users must be positive")


def synthesize_trace(cfg: GenConfig) -> TraceSet:
    """Draw a synthetic trace; a pure function of ``cfg`` (seed included)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.job_count
    gaps = rng.exponential(1.0 / cfg.arrival_rate, size=n)
    gaps[0] = 0.0
    submits = np.floor(np.cumsum(gaps)).astype(np.int64)
    # mean of the log-normal equals runtime_mean
    mu = math.log(cfg.runtime_mean) - cfg.runtime_sigma ** 2 / 2
    runtimes = np.clip(np.rint(rng.lognormal(mu, cfg.runtime_sigma, size=n)), 1, cfg.max_runtime)
    gpus = rng.choice(GPU_DEMANDS, size=n, p=np.asarray(cfg.gpu_demand_weights, float))
    types = sorted(cfg.gpu_type_mix)
    type_idx = rng.choice(len(types), size=n, p=[cfg.gpu_type_mix[t] for t in types])
    vcs = sorted(cfg.vc_mix)
    vc_idx = rng.choice(len(vcs), size=n, p=[cfg.vc_mix[v] for v in vcs])
    users = rng.integers(0, cfg.users, size=n)
    lo, hi = cfg.estimate_noise
    noise = rng.uniform(lo, hi, size=n)
    requested = np.maximum(1, np.rint(runtimes * noise)).astype(np.int64)

    jobs = [
        JobRecord(
            job_id=f"j{i:06d}",
            user_id=f"u{int(users[i]):03d}",
            vc_id=vcs[vc_idx[i]],
            submit_time=int(submits[i]),
            requested_time=int(requested[i]),
            actual_runtime=int(runtimes[i]),
            requested_gpus=int(gpus[i]),
            gpu_type=types[type_idx[i]],
        )
        for i in range(n)
    ]
    return _sorted_trace(jobs, meta={"source": "synthetic", "seed": cfg.seed})


# ---------------------------------------------------------------------------

def split_trace(t: TraceSet, train_fraction: float):
    """Prefix/suffix split; the train side gets floor(fraction * n) jobs."""
    if not 0 < train_fraction < 1:
        raise TraceError("train_fraction must lie in (0, 1)")
    n = len(t.jobs)
    if n < 2:
        raise TraceError("need at least 2 jobs to split")
    k = int(math.floor(train_fraction * n + 1e-9))
    k = min(max(k, 1), n - 1)  # both halves must remain valid traces
    meta = dict(t.meta)
    return (TraceSet(t.jobs[:k], t.epoch, {**meta, "split": "train"}),
            TraceSet(t.jobs[k:], t.epoch, {**meta, "split": "test"}))


def rebase(jobs: Sequence[JobRecord]) -> list:
    """Shift submit times so the first job arrives at 0."""
    if not jobs:
        return []
    origin = jobs[0].submit_time
    return [replace(j, submit_time=j.submit_time - origin) for j in jobs]


def sample_batch(t: TraceSet, size: int, rng_seed) -> list:
    """A contiguous window of ``size`` jobs at a uniformly random start index."""
    n = len(t.jobs)
    if size < 1 or size > n:
        raise TraceError(f"batch size {size} outside 1..{n}")
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(0, n - size + 1))
    return rebase(t.jobs[start:start + size])


def infer_resources(jobs, cpu_per_gpu, mem_per_gpu) -> list:
    """Fill absent CPU/memory requests proportionally to the GPU request."""
    out = []
    for j in jobs:
        if j.requested_cpus is None or j.requested_mem_gb is None:
            j = replace(
                j,
                requested_cpus=j.requested_cpus if j.requested_cpus is not None
                else j.requested_gpus * cpu_per_gpu,
                requested_mem_gb=j.requested_mem_gb if j.requested_mem_gb is not None
                else j.requested_gpus * mem_per_gpu,
            )
        out.append(j)
    return out
