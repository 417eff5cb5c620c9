"""Event-driven scheduling engine with EASY backfilling.

Arrivals and completions advance a virtual clock.  All events sharing a
timestamp are applied first (completions before arrivals, then by job
order) and the scheduler runs once on the resulting state.  Completion
always happens at ``start + actual_runtime``; the runtime source in the
config only changes what policies, features and reservations observe.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import allocator, features
from .cluster import ClusterSpec, ClusterState, InfeasiblePlan, PlacementPlan
from .metrics import DEFAULT_TAU, JobOutcome, UtilizationTimeline, aggregate_score, summarize
from .policies import PolicyKind, score_arrays
from .trace import GenConfig, infer_resources, synthesize_trace

COMPLETION, ARRIVAL = 0, 1


class UnschedulableJob(RuntimeError):
    pass


@dataclass
class SimConfig:
    scheduler: str = "base"  # "base" or "rl"
    policy: PolicyKind = PolicyKind.FIFO
    feature_runtime_source: str = "requested"  # "actual" or "requested"
    backfill: bool = True
    k: int = allocator.DEFAULT_K
    metric: str = "wait"
    seed: int = 0
    action_mode: str = "greedy"  # "sample" (training) or "greedy" (evaluation)
    naive: bool = False
    use_allocator: bool = True
    tau: float = DEFAULT_TAU
    log_decisions: bool = False
    priorities: Optional[dict] = None  # external per-job priorities (base mode)

    def __post_init__(self):
        self.policy = PolicyKind.parse(self.policy)
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.scheduler not in ("base", "rl"):
            raise ValueError("scheduler must be 'base' or 'rl'")
        if self.feature_runtime_source not in ("actual", "requested"):
            raise ValueError("feature_runtime_source must be 'actual' or 'requested'")
        if self.action_mode not in ("sample", "greedy"):
            raise ValueError("action_mode must be 'sample' or 'greedy'")


@dataclass
class Decision:
    ov: np.ndarray  # valid rows only
    cv: np.ndarray  # valid rows only
    valid_rows: int
    action: int
    logp: float
    value: float


@dataclass
class EpisodeResult:
    outcomes: list
    timeline: UtilizationTimeline
    tau: float = DEFAULT_TAU
    decisions: list = field(default_factory=list)
    log: list = field(default_factory=list)
    backfill_checks: list = field(default_factory=list)  # (head, shadow_before, shadow_after)
    head_reservations: list = field(default_factory=list)  # (head, shadow) per backfill pass
    backfilled: int = 0
    wall_time: float = 0.0

    def aggregate(self, metric) -> float:
        return aggregate_score(self.outcomes, metric, self.tau, self.timeline)

    def summary(self) -> dict:
        return summarize(self.outcomes, self.timeline, self.tau)

    def score(self, metric) -> float:
        """Aggregate on a lower-is-better scale (utilization negated)."""
        v = self.aggregate(metric)
        return -v if metric == "utilization" else v


def _digest(state):
    return hashlib.blake2b(state.free_gpus.tobytes() + state.free_cpus.tobytes(),
                           digest_size=8).hexdigest()


class Engine:
    def __init__(self, batch, spec: ClusterSpec, cfg: SimConfig, decider=None, rng=None):
        if not batch:
            raise ValueError("empty batch")
        if cfg.scheduler == "rl" and decider is None:
            raise ValueError("rl scheduler needs a decider")
        self.cfg = cfg
        self.spec = spec
        self.decider = decider
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        jobs = sorted(infer_resources(batch, spec.cpu_per_gpu, spec.mem_per_gpu),
                      key=lambda j: (j.submit_time, j.job_id))
        self.jobs = jobs
        self.pos = {j.job_id: i for i, j in enumerate(jobs)}
        self.submit = np.array([j.submit_time for j in jobs], dtype=np.float64)
        src_actual = cfg.feature_runtime_source == "actual"
        self.est_run = np.array([j.actual_runtime if src_actual else j.requested_time
                                 for j in jobs], dtype=np.float64)
        self.gpus = np.array([j.requested_gpus for j in jobs], dtype=np.float64)
        self.state = ClusterState(spec)
        self._check_schedulable()
        self.queue = []  # job indices, ascending (= submit order)
        self.running = {}  # idx -> (start, actual_end, est_end)
        self.start = {}
        self.user_usage = {}
        self.timeline = UtilizationTimeline([], spec.total_gpus)
        self.result = EpisodeResult([], self.timeline, cfg.tau)
        self.events = [(j.submit_time, ARRIVAL, i) for i, j in enumerate(jobs)]
        heapq.heapify(self.events)
        self.now = 0

    def _check_schedulable(self):
        idle = ClusterState(self.spec)
        seen = {}
        for j in self.jobs:
            key = (j.requested_gpus, j.gpu_type, j.vc_id, j.requested_cpus, j.requested_mem_gb)
            if key not in seen:
                seen[key] = idle.can_schedule_now(j)
            if not seen[key]:
                raise UnschedulableJob(f"job {j.job_id} ({j.requested_gpus} x {j.gpu_type}, "
                                       f"vc {j.vc_id}) cannot fit the idle cluster")

    # -- bookkeeping --------------------------------------------------------------
    def _log(self, event, i, plan=None, **extra):
        if self.cfg.log_decisions:
            self.result.log.append({
                "t": self.now, "event": event, "job": self.jobs[i].job_id,
                "plan": None if plan is None else plan.to_list(), "queue": len(self.queue),
                "digest": _digest(self.state), **extra})

    def _start(self, i, plan, how="start"):
        job = self.jobs[i]
        self.state.allocate(job, plan)
        self.queue.remove(i)
        end = self.now + job.actual_runtime
        self.running[i] = (self.now, end, self.now + self.est_run[i])
        self.start[i] = self.now
        heapq.heappush(self.events, (end, COMPLETION, i))
        self._log(how, i, plan)

    def _finish(self, i):
        job = self.jobs[i]
        self.state.release(job.job_id)
        start, end, _ = self.running.pop(i)
        self.user_usage[job.user_id] = self.user_usage.get(job.user_id, 0.0) + \
            job.requested_gpus * (end - start)
        self._log("finish", i)

    # -- ordering ------------------------------------------------------------------
    def _base_order(self):
        q = np.array(self.queue)
        if self.cfg.priorities is not None:
            pr = np.array([self.cfg.priorities.get(self.jobs[i].job_id, -np.inf) for i in q])
            return q[np.lexsort((q, -pr))].tolist()
        usage = None
        if self.cfg.policy is PolicyKind.SLURM_MF:
            usage = [self.user_usage.get(self.jobs[i].user_id, 0.0) for i in q]
        s = score_arrays(self.cfg.policy, self.submit[q], self.est_run[q], self.gpus[q],
                         self.now, usage, self.spec.total_gpus)
        return q[np.lexsort((q, -s))].tolist()

    def _rl_decide(self):
        rows = self.queue[:features.MAX_QUEUE_SIZE]  # queue is in submit order
        sm = features.build_state([self.jobs[i] for i in rows], self.state, self.now,
                                  self.cfg.feature_runtime_source, self.cfg.naive)
        probs, value = self.decider.evaluate(sm)
        if self.cfg.action_mode == "greedy":
            a = int(np.argmax(probs[:sm.valid_rows]))
        else:
            a = int(self.rng.choice(sm.valid_rows, p=probs[:sm.valid_rows] /
                                    probs[:sm.valid_rows].sum()))
        n = sm.valid_rows
        self.result.decisions.append(Decision(
            sm.ov[:n].copy(), sm.cv[:n].copy(), n, a, float(np.log(probs[a])), float(value)))
        p = probs[:n]
        order = sorted(range(n), key=lambda r: (-p[r], r))
        ranked = [rows[a]] + [rows[r] for r in order if r != a] + self.queue[n:]
        return ranked

    # -- placement -------------------------------------------------------------------
    def _plan(self, i, ranked, lookahead=True):
        job = self.jobs[i]
        if self.cfg.scheduler == "rl" and self.cfg.use_allocator:
            la = []
            if lookahead and self.cfg.k > 1:
                la = [self.jobs[r] for r in ranked[:self.cfg.k] if r != i][:self.cfg.k - 1]
            sol = allocator.allocate_head(job, self.state, la)
            return None if sol is None or not sol.feasible else sol.plan
        cands = self.state.candidate_placements(job)
        return cands[0] if cands else None

    # -- backfilling ---------------------------------------------------------------------
    def reservation(self, i, state=None, running=None):
        """Earliest (estimated) time the job fits, and the projected state at that time."""
        proj = (self.state if state is None else state).copy()
        job = self.jobs[i]
        if proj.can_schedule_now(job):
            return self.now, proj
        running = self.running if running is None else running
        ends = sorted((max(est_end, self.now), r) for r, (_, _, est_end) in running.items())
        k = 0
        while k < len(ends):
            t = ends[k][0]
            while k < len(ends) and ends[k][0] == t:
                proj.release(self.jobs[ends[k][1]].job_id)
                k += 1
            if proj.can_schedule_now(job):
                return t, proj
        raise UnschedulableJob(f"job {job.job_id} never fits")  # excluded at construction

    def backfill(self, head, ranked):
        """EASY backfilling behind ``head``; returns indices of the jobs started."""
        if not self.cfg.backfill:
            return []
        shadow, proj = self.reservation(head)
        head_job = self.jobs[head]
        started = []
        queued = set(self.queue)
        for c in ranked:
            if c == head or c not in queued:
                continue
            job = self.jobs[c]
            pool = self.state.eligible(job)
            if self.gpus[c] > self.state.free_gpus[pool].sum():
                continue
            plan = self._plan(c, ranked, lookahead=False)
            if plan is None:
                continue
            if self.now + self.est_run[c] <= shadow:
                self._start(c, plan, "backfill")
                started.append(c)
                queued.discard(c)
                continue
            try:
                proj.allocate(job, plan)
            except InfeasiblePlan:
                continue
            if proj.can_schedule_now(head_job):
                self._start(c, plan, "backfill")
                started.append(c)
                queued.discard(c)
            else:
                proj.release(job.job_id)
        self.result.head_reservations.append((head_job.job_id, shadow))
        self._log("reserve", head, shadow=float(shadow))
        if started:
            after, _ = self.reservation(head)
            self.result.backfill_checks.append((head_job.job_id, shadow, after))
            self.result.backfilled += len(started)
        return started

    # -- main loop --------------------------------------------------------------------------
    def schedule(self):
        while self.queue:
            if self.cfg.scheduler == "rl":
                ranked = self._rl_decide()
            else:
                ranked = self._base_order()
            head = ranked[0]
            plan = self._plan(head, ranked)
            if plan is not None:
                self._start(head, plan)
                continue
            self.backfill(head, ranked)
            break

    def advance(self, until=float("inf")):
        """Process every event up to and including time ``until``."""
        while self.events and self.events[0][0] <= until:
            self.now = self.events[0][0]
            while self.events and self.events[0][0] == self.now:
                _, kind, i = heapq.heappop(self.events)
                if kind == COMPLETION:
                    self._finish(i)
                else:
                    self.queue.append(i)
                    self._log("arrive", i)
            self.queue.sort()
            self.schedule()
            self.timeline.record(self.now, self.state.allocated_gpus())

    def run(self) -> EpisodeResult:
        t0 = time.perf_counter()
        self.advance()
        self.result.outcomes = [
            JobOutcome(j.job_id, j.submit_time, int(self.start[i]),
                       int(self.start[i] + j.actual_runtime), j.requested_gpus)
            for i, j in enumerate(self.jobs)]
        self.result.wall_time = time.perf_counter() - t0
        return self.result


def run_episode(batch, cluster: ClusterSpec, cfg: SimConfig, decider=None, rng=None) -> EpisodeResult:
    return Engine(batch, cluster, cfg, decider, rng).run()


def replay_log(log, spec: ClusterSpec, jobs) -> int:
    """Re-apply a decision log to a fresh cluster, checking conservation at every step.

    Returns the number of allocate/release operations replayed; raises
    AssertionError on any violation or digest mismatch.
    """
    jobs = {j.job_id: j for j in infer_resources(jobs, spec.cpu_per_gpu, spec.mem_per_gpu)}
    state = ClusterState(spec)
    ops = 0
    for rec in log:
        if rec["event"] in ("start", "backfill"):
            plan = PlacementPlan(tuple((n, c) for n, c in rec["plan"]),
                                 "pack" if len(rec["plan"]) == 1 else "spread")
            state.allocate(jobs[rec["job"]], plan)
        elif rec["event"] == "finish":
            state.release(rec["job"])
        else:
            continue
        ops += 1
        state.check_conservation()
        assert _digest(state) == rec["digest"], f"digest mismatch at t={rec['t']}"
    assert not state.allocations, "jobs still allocated at end of log"
    return ops


def reservation_violations(log) -> int:
    """Count broken head reservations in a decision log.

    A reservation stands from a ``reserve`` record until its holder starts or
    another job starts at the head of the queue (re-prioritisation, which
    backfilling cannot cause).  While it stands, re-reserving the same job must
    not push its time later, and the holder must start no later than it.
    """
    holder, shadow, bad = None, None, 0
    for rec in log:
        ev = rec["event"]
        if ev == "reserve":
            if rec["job"] == holder and rec["shadow"] > shadow:
                bad += 1
            if rec["job"] != holder or rec["shadow"] < shadow:
                shadow = rec["shadow"]
            holder = rec["job"]
        elif ev == "start":
            if rec["job"] == holder and rec["t"] > shadow:
                bad += 1
            holder, shadow = None, None
        elif ev == "backfill" and rec["job"] == holder:
            holder, shadow = None, None
    return bad


def write_log(log, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _uniform(labels):
    w = {x: 1.0 / len(labels) for x in labels}
    w[labels[0]] += 1.0 - sum(w.values())
    return w


def measure_overhead(queue_sizes, decider, spec: ClusterSpec, seed=0, repeats=5,
                     naive=False, k=allocator.DEFAULT_K, batch_runs=False) -> list:
    """Wall-clock latency of one scheduling decision at each queue size.

    For each size a synthetic queue of that many waiting jobs is placed on a
    half-loaded cluster; a decision is state construction + actor/critic
    forward + allocator choice for the selected job.  With ``batch_runs`` a
    full greedy episode over the queue is also timed.
    """
    types = sorted({n.gpu_type for n in spec.nodes})
    vcs = sorted({n.vc_id for n in spec.nodes})
    rows = []
    for n in queue_sizes:
        gen = GenConfig(job_count=n + 64, arrival_rate=1.0, seed=seed,
                        gpu_type_mix=_uniform(types), vc_mix=_uniform(vcs),
                        gpu_demand_weights=(0.5, 0.25, 0.15, 0.1, 0.0))
        jobs = list(synthesize_trace(gen).jobs)
        cfg = SimConfig(scheduler="rl", k=k, naive=naive, action_mode="greedy", seed=seed)
        eng = Engine(jobs, spec, cfg, decider)
        # load the cluster with the first jobs, the rest wait
        for i in range(64):
            eng.queue.append(i)
        eng.queue.extend(range(64, len(jobs)))
        for i in range(64):
            if eng.state.total_free() < eng.state.cap_gpus.sum() / 2:
                break
            cands = eng.state.candidate_placements(jobs[i])
            if cands:
                eng._start(i, cands[0])
        eng.now = int(eng.submit.max())
        lat = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            ranked = eng._rl_decide()
            eng._plan(ranked[0], ranked)
            lat.append(time.perf_counter() - t0)
        eng.result.decisions.clear()
        row = {"queue_size": n, "decision_s": float(np.median(lat)),
               "decision_min_s": float(np.min(lat))}
        if batch_runs:
            t0 = time.perf_counter()
            run_episode([j for j in jobs[:n]], spec, cfg, decider)
            row["batch_s"] = time.perf_counter() - t0
        rows.append(row)
    return rows
