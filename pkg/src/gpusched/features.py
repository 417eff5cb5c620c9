"""Feature building, heuristic feature sampling and state-matrix assembly.

All normalisation is min-max over the current (truncated) queue snapshot,
clamped to [0, 1], with constant columns mapped to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

MAX_QUEUE_SIZE = 256
OV_WIDTH = 8
CV_WIDTH = 5
FRAG_THRESHOLD = 0.5
EMPHASIS = 1.0
DEEMPHASIS = 0.6
WAYS_CAP = 8

OV_COLUMNS = ("req_gpus", "req_time", "wait", "dsr", "future_avail", "cff", "toggled",
              "num_ways")
NAIVE_COLUMNS = ("req_gpus", "req_time", "wait", "submit", "gpu_type", "req_cpus",
                 "req_mem", "free_nodes")
CV_COLUMNS = ("submit", "req_time", "can_schedule_now", "req_gpus", "wait")
LAYOUT_VERSION = {False: "pro-ov8-v1", True: "naive-ov8-v1"}

# tracked per job: identity (3), visible job (6), cluster (3), engineered (5)
TABLE_COLUMNS = ("job_id", "user_id", "vc_id", "requested_gpus", "gpu_type",
                 "requested_time", "submit_time", "req_cpus", "req_mem", "free_nodes",
                 "can_schedule_now", "num_ways_to_schedule", "dsr", "job_size", "urgency",
                 "future_avail", "cff", "wait_time")


def minmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return np.zeros_like(x)
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


# -- engineered features --------------------------------------------------------

def _pool_free(job, state):
    idx = state.eligible(job)
    return state.free_gpus[idx]


def dsr(job, state) -> float:
    """Requested GPUs over free GPUs of the job's type; capped at the request when none are free."""
    free = int(_pool_free(job, state).sum())
    return float(job.requested_gpus) / max(free, 1)


def future_avail(job, state, queue) -> float:
    """Free GPUs left in the job's pool after its own request and the demand queued ahead of it.

    "Ahead" means earlier in ``queue`` and drawing on the same node pool.
    """
    free = int(_pool_free(job, state).sum())
    ahead = 0
    for other in queue:
        if other is job or other.job_id == job.job_id:
            break
        if np.array_equal(state.eligible(other), state.eligible(job)):
            ahead += other.requested_gpus
    return float(free - job.requested_gpus - ahead)


def cff_of(free) -> float:
    """1 - sum(f^2) / (sum f)^2 over per-node free GPU counts; 0 when nothing is free."""
    free = np.asarray(free, dtype=np.float64)
    total = free.sum()
    if total <= 0:
        return 0.0
    return float(1.0 - np.sum(free * free) / (total * total))


def cff(state, job=None) -> float:
    """Fragmentation of the whole cluster, or of the job's node pool when given."""
    return cff_of(state.free_gpus if job is None else _pool_free(job, state))


def job_size(job, queue, runtime_source="requested") -> float:
    rt = _rt_array(queue, runtime_source)
    sizes = np.array([j.requested_gpus for j in queue], dtype=np.float64) * rt
    pos = [i for i, j in enumerate(queue) if j.job_id == job.job_id][0]
    return float(minmax(sizes)[pos])


def urgency(job, now, runtime_source="requested") -> float:
    wait = max(now - job.submit_time, 0.0)
    rt = job.requested_time if runtime_source == "requested" else job.actual_runtime
    return wait / (wait + rt)


def _rt_array(jobs, runtime_source):
    if runtime_source == "actual":
        return np.array([j.actual_runtime for j in jobs], dtype=np.float64)
    return np.array([j.requested_time for j in jobs], dtype=np.float64)


# -- full feature table ---------------------------------------------------------

def feature_table(queue, state, now, runtime_source="requested") -> dict:
    """All tracked features (raw, unnormalised) for ``queue``, as column arrays."""
    n = len(queue)
    gpus = np.array([j.requested_gpus for j in queue], dtype=np.float64)
    rt = _rt_array(queue, runtime_source)
    submit = np.array([j.submit_time for j in queue], dtype=np.float64)
    wait = np.maximum(now - submit, 0.0)
    cpus = np.array([j.requested_cpus if j.requested_cpus is not None
                     else j.requested_gpus * state.spec.cpu_per_gpu for j in queue], dtype=np.float64)
    mem = np.array([j.requested_mem_gb if j.requested_mem_gb is not None
                    else j.requested_gpus * state.spec.mem_per_gpu for j in queue], dtype=np.float64)
    type_labels = sorted(set(state.types.tolist()) | {j.gpu_type for j in queue})
    type_code = np.array([type_labels.index(j.gpu_type) for j in queue], dtype=np.float64)

    free_pool = np.zeros(n)
    idle_nodes = np.zeros(n)
    frag = np.zeros(n)
    ways = np.zeros(n)
    ahead = np.zeros(n)
    pool_stats = {}
    pool_demand = {}
    for r, job in enumerate(queue):
        idx = state.eligible(job)
        key = (idx.size, idx.tobytes())
        st = pool_stats.get(key)
        if st is None:
            f = state.free_gpus[idx]
            st = (float(f.sum()), float(np.sum(f == state.cap_gpus[idx])), cff_of(f))
            pool_stats[key] = st
        free_pool[r], idle_nodes[r], frag[r] = st
        ahead[r] = pool_demand.get(key, 0.0)
        pool_demand[key] = ahead[r] + job.requested_gpus
        ways[r] = len(state.candidate_placements(job))

    return {
        "job_id": [j.job_id for j in queue],
        "user_id": [j.user_id for j in queue],
        "vc_id": [j.vc_id for j in queue],
        "requested_gpus": gpus,
        "gpu_type": type_code,
        "requested_time": rt,
        "submit_time": submit,
        "req_cpus": cpus,
        "req_mem": mem,
        "free_nodes": idle_nodes,
        "can_schedule_now": (ways > 0).astype(np.float64),
        "num_ways_to_schedule": ways,
        "dsr": gpus / np.maximum(free_pool, 1.0),
        "job_size": minmax(gpus * rt),
        "urgency": wait / (wait + rt),
        "future_avail": free_pool - gpus - ahead,
        "cff": frag,
        "wait_time": wait,
    }


def sample_features(row: dict) -> np.ndarray:
    """Eight-slot observation for one job from its normalised feature row.

    ``row`` carries req_gpus, req_time, wait, dsr, future_avail (all
    normalised), cff, job_size, urgency and num_ways (raw count).  The
    toggled slot holds job_size when the pool is fragmented and urgency
    otherwise; the ways slot is de-emphasised for single-way jobs.
    """
    toggled = row["job_size"] if row["cff"] > FRAG_THRESHOLD else row["urgency"]
    ways = min(row["num_ways"], WAYS_CAP) / WAYS_CAP
    ways *= EMPHASIS if row["num_ways"] >= 2 else DEEMPHASIS
    return np.array([row["req_gpus"], row["req_time"], row["wait"], row["dsr"],
                     row["future_avail"], row["cff"], EMPHASIS * toggled, ways])


def _sample_matrix(t) -> np.ndarray:
    toggled = np.where(t["cff"] > FRAG_THRESHOLD, t["job_size"], t["urgency"])
    w = t["num_ways_to_schedule"]
    ways = np.minimum(w, WAYS_CAP) / WAYS_CAP * np.where(w >= 2, EMPHASIS, DEEMPHASIS)
    return np.column_stack([
        minmax(t["requested_gpus"]), minmax(t["requested_time"]), minmax(t["wait_time"]),
        minmax(t["dsr"]), minmax(t["future_avail"]), t["cff"], EMPHASIS * toggled, ways,
    ])


def _naive_matrix(t) -> np.ndarray:
    return np.column_stack([minmax(t[c]) for c in (
        "requested_gpus", "requested_time", "wait_time", "submit_time", "gpu_type",
        "req_cpus", "req_mem", "free_nodes")])


@dataclass
class StateMatrix:
    ov: np.ndarray  # (MAX_QUEUE_SIZE, 8)
    cv: np.ndarray  # (MAX_QUEUE_SIZE, 5)
    valid_rows: int
    row_jobs: list

    @property
    def mask(self):
        m = np.zeros(self.ov.shape[0], dtype=bool)
        m[:self.valid_rows] = True
        return m


def truncate_queue(queue, limit=MAX_QUEUE_SIZE) -> list:
    """Earliest submitters first, at most ``limit`` jobs."""
    q = sorted(queue, key=lambda j: (j.submit_time, j.job_id))
    return q[:limit]


def build_state(queue, state, now, runtime_source="requested", naive=False,
                max_rows=MAX_QUEUE_SIZE) -> StateMatrix:
    ov = np.zeros((max_rows, OV_WIDTH))
    cv = np.zeros((max_rows, CV_WIDTH))
    rows = truncate_queue(queue, max_rows)
    n = len(rows)
    if n == 0:
        return StateMatrix(ov, cv, 0, [])
    t = feature_table(rows, state, now, runtime_source)
    ov[:n] = _naive_matrix(t) if naive else _sample_matrix(t)
    cv[:n] = np.column_stack([
        minmax(t["submit_time"]), minmax(t["requested_time"]), t["can_schedule_now"],
        minmax(t["requested_gpus"]), minmax(t["wait_time"]),
    ])
    return StateMatrix(ov, cv, n, [j.job_id for j in rows])


def dump_state(queue, state, now, table_path, state_path, runtime_source="requested",
               naive=False):
    """Write the full feature table and the sampled state matrix as CSV."""
    rows = truncate_queue(queue)
    t = feature_table(rows, state, now, runtime_source) if rows else {c: [] for c in TABLE_COLUMNS}
    with open(table_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in range(len(rows)):
            w.writerow([t[c][r] if isinstance(t[c], list) else repr(float(t[c][r]))
                        for c in TABLE_COLUMNS])
    sm = build_state(queue, state, now, runtime_source, naive)
    cols = NAIVE_COLUMNS if naive else OV_COLUMNS
    with open(state_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "job_id"] + [f"ov_{c}" for c in cols] + [f"cv_{c}" for c in CV_COLUMNS])
        for r in range(sm.ov.shape[0]):
            jid = sm.row_jobs[r] if r < sm.valid_rows else ""
            w.writerow([r, jid] + [repr(float(x)) for x in sm.ov[r]]
                       + [repr(float(x)) for x in sm.cv[r]])
    return sm
