"""Heterogeneous GPU cluster: node specs, allocation bookkeeping, candidate placements."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .trace import MISC

MEM_EPS = 1e-9


class ClusterError(ValueError):
    pass


class InfeasiblePlan(ClusterError):
    pass


@dataclass(frozen=True)
class NodeSpec:
    node_id: str
    gpu_type: str
    gpus: int
    cpus: int
    mem_gb: float
    vc_id: str = "default"


@dataclass(frozen=True)
class ClusterSpec:
    nodes: tuple
    cpu_per_gpu: int = 4
    mem_per_gpu: float = 32.0
    confine_vc: bool = True

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if not ids:
            raise ClusterError("cluster has no nodes")
        if len(set(ids)) != len(ids):
            raise ClusterError("duplicate node_id in cluster spec")
        for n in self.nodes:
            if n.gpus < 1 or n.cpus < 1 or not n.mem_gb > 0:
                raise ClusterError(f"node {n.node_id}: capacities must be positive")
        if self.cpu_per_gpu < 1 or not self.mem_per_gpu > 0:
            raise ClusterError("cpu_per_gpu and mem_per_gpu must be positive")

    @property
    def total_gpus(self):
        return sum(n.gpus for n in self.nodes)


@dataclass(frozen=True)
class PlacementPlan:
    assignments: tuple  # ((node_id, gpu_count), ...)
    style: str = "pack"

    def __post_init__(self):
        nodes = [a[0] for a in self.assignments]
        if len(set(nodes)) != len(nodes):
            raise ClusterError("plan repeats a node")
        if any(c < 1 for _, c in self.assignments):
            raise ClusterError("plan entries need gpu_count >= 1")

    @property
    def total_gpus(self):
        return sum(c for _, c in self.assignments)

    @property
    def width(self):
        return len(self.assignments)

    def to_list(self):
        return [[n, c] for n, c in self.assignments]


def node_group(count, gpu_type, gpus, cpus, mem_gb, vc_id="default", prefix=None):
    prefix = prefix or f"{vc_id}-{gpu_type}-"
    return [NodeSpec(f"{prefix}{i:03d}", gpu_type, gpus, cpus, mem_gb, vc_id) for i in range(count)]


def helios_layout(gpu_type="V100", cpus_per_node=48, mem_per_node=384.0,
                  cpu_per_gpu=6, mem_per_gpu=48.0) -> ClusterSpec:
    """Five virtual clusters of 16, 12, 10, 8 and 8 eight-GPU nodes (432 GPUs)."""
    nodes = []
    for vc, count in zip(("VC1", "VC2", "VC3", "VC4", "VC5"), (16, 12, 10, 8, 8)):
        nodes += node_group(count, gpu_type, 8, cpus_per_node, mem_per_node, vc)
    return ClusterSpec(tuple(nodes), cpu_per_gpu, mem_per_gpu)


_GROUP = re.compile(r"^\s*(\d+)\s*[x*]\s*([^:\s]+):(\d+):(\d+):([\d.]+)(?::(\S+))?\s*$")


def parse_node_groups(text, cpu_per_gpu=4, mem_per_gpu=32.0, confine_vc=True) -> ClusterSpec:
    """Parse ``count x TYPE:gpus:cpus:mem_gb[:vc]`` groups separated by commas/newlines.

    >>> parse_node_groups("2 x V100:8:32:256").total_gpus
    16
    """
    nodes = []
    for chunk in re.split(r"[,\n;]", text):
        if not chunk.strip():
            continue
        m = _GROUP.match(chunk)
        if not m:
            raise ClusterError(f"bad node group {chunk.strip()!r}")
        count, typ, gpus, cpus, mem, vc = m.groups()
        vc = vc or "default"
        nodes += node_group(int(count), typ, int(gpus), int(cpus), float(mem), vc,
                            prefix=f"{vc}-{typ}-{len(nodes):03d}-")
    return ClusterSpec(tuple(nodes), int(cpu_per_gpu), float(mem_per_gpu), confine_vc)


def _divisors_above_one(n):
    return [m for m in range(2, n + 1) if n % m == 0]


class ClusterState:
    """Mutable free-resource bookkeeping for one simulation episode."""

    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        nodes = spec.nodes
        self.node_ids = [n.node_id for n in nodes]
        self.index = {nid: i for i, nid in enumerate(self.node_ids)}
        self.types = np.array([n.gpu_type for n in nodes])
        self.vcs = np.array([n.vc_id for n in nodes])
        self.cap_gpus = np.array([n.gpus for n in nodes], dtype=np.int64)
        self.cap_cpus = np.array([n.cpus for n in nodes], dtype=np.int64)
        self.cap_mem = np.array([n.mem_gb for n in nodes], dtype=np.float64)
        # rank of node_id in lexicographic order, used for deterministic tie-breaks
        self.id_rank = np.argsort(np.argsort(np.array(self.node_ids), kind="stable"), kind="stable")
        self.free_gpus = self.cap_gpus.copy()
        self.free_cpus = self.cap_cpus.copy()
        self.free_mem = self.cap_mem.copy()
        self.node_jobs = np.zeros(len(nodes), dtype=np.int64)
        self.allocations = {}  # job_id -> (plan, ((idx, gpus, cpus, mem), ...))
        self.version = 0
        self._pools = {}
        self._cand_cache = {}
        self._cache_version = -1

    # -- construction helpers -------------------------------------------
    def copy(self) -> "ClusterState":
        new = object.__new__(ClusterState)
        new.__dict__.update(self.__dict__)
        new.free_gpus = self.free_gpus.copy()
        new.free_cpus = self.free_cpus.copy()
        new.free_mem = self.free_mem.copy()
        new.node_jobs = self.node_jobs.copy()
        new.allocations = dict(self.allocations)
        new._cand_cache = {}
        new._cache_version = -1
        return new

    def snapshot(self):
        """Hashable view of all mutable state, for equality checks in tests."""
        return (tuple(self.free_gpus.tolist()), tuple(self.free_cpus.tolist()),
                tuple(self.free_mem.tolist()),
                tuple(sorted((k, v[0]) for k, v in self.allocations.items())))

    # -- eligibility ------------------------------------------------------
    def eligible(self, job) -> np.ndarray:
        """Indices of nodes the job may use (GPU type, then virtual cluster)."""
        vc = job.vc_id if self.spec.confine_vc else ""
        key = (job.gpu_type, vc)
        idx = self._pools.get(key)
        if idx is None:
            mask = np.ones(len(self.node_ids), dtype=bool)
            if job.gpu_type != MISC:
                mask &= self.types == job.gpu_type
            if vc:
                mask &= self.vcs == vc
            idx = np.flatnonzero(mask)
            self._pools[key] = idx
        return idx

    def demand(self, job, gpus):
        """CPU and memory needed by ``gpus`` of the job's GPUs on one node."""
        if job.requested_cpus is not None:
            cpus = int(math.ceil(job.requested_cpus * gpus / job.requested_gpus))
        else:
            cpus = gpus * self.spec.cpu_per_gpu
        if job.requested_mem_gb is not None:
            mem = job.requested_mem_gb * gpus / job.requested_gpus
        else:
            mem = gpus * self.spec.mem_per_gpu
        return cpus, mem

    # -- queries ------------------------------------------------------------
    def free_gpus_by_type(self) -> dict:
        out = {}
        for t, f in zip(self.types.tolist(), self.free_gpus.tolist()):
            out[t] = out.get(t, 0) + f
        return out

    def total_free(self):
        return int(self.free_gpus.sum())

    def allocated_gpus(self):
        return int(self.cap_gpus.sum() - self.free_gpus.sum())

    def _fits(self, idx, job, per):
        cpus, mem = self.demand(job, per)
        return ((self.free_gpus[idx] >= per) & (self.free_cpus[idx] >= cpus)
                & (self.free_mem[idx] + MEM_EPS >= mem))

    def candidate_placements(self, job) -> list:
        """Feasible members of the pack / even-spread family for ``job``.

        Per GPU-type class of eligible nodes: one pack plan, then one even
        spread over m nodes for every divisor m > 1 of the request.  Nodes are
        taken in (descending free GPUs, ascending node_id) order.
        """
        if self._cache_version != self.version:
            self._cand_cache = {}
            self._cache_version = self.version
        key = (job.requested_gpus, job.gpu_type, job.vc_id, job.requested_cpus,
               job.requested_mem_gb)
        hit = self._cand_cache.get(key)
        if hit is not None:
            return list(hit)

        req = job.requested_gpus
        plans = []
        pool = self.eligible(job)
        if pool.size and int(self.free_gpus[pool].sum()) >= req:
            classes = [None] if job.gpu_type != MISC else sorted(set(self.types[pool].tolist()))
            for cls in classes:
                idx = pool if cls is None else pool[self.types[pool] == cls]
                if int(self.free_gpus[idx].sum()) < req:
                    continue
                order = idx[np.lexsort((self.id_rank[idx], -self.free_gpus[idx]))]
                ok = order[self._fits(order, job, req)]
                if ok.size:
                    plans.append(PlacementPlan(((self.node_ids[ok[0]], req),), "pack"))
                for m in _divisors_above_one(req):
                    if m > order.size:
                        break
                    per = req // m
                    ok = order[self._fits(order, job, per)]
                    if ok.size >= m:
                        plans.append(PlacementPlan(
                            tuple((self.node_ids[i], per) for i in ok[:m]), "spread"))
        self._cand_cache[key] = tuple(plans)
        return plans

    def can_schedule_now(self, job) -> bool:
        return bool(self.candidate_placements(job))

    def check_plan(self, job, plan):
        """Return per-entry demands, or raise InfeasiblePlan."""
        if plan.total_gpus != job.requested_gpus:
            raise InfeasiblePlan(f"{job.job_id}: plan totals {plan.total_gpus} GPUs, "
                                 f"job requests {job.requested_gpus}")
        pool = set(self.eligible(job).tolist())
        entries = []
        for node_id, g in plan.assignments:
            i = self.index.get(node_id)
            if i is None:
                raise InfeasiblePlan(f"unknown node {node_id}")
            if i not in pool:
                raise InfeasiblePlan(f"{job.job_id}: node {node_id} has the wrong GPU type or VC")
            cpus, mem = self.demand(job, g)
            if g > self.free_gpus[i] or cpus > self.free_cpus[i] or mem > self.free_mem[i] + MEM_EPS:
                raise InfeasiblePlan(f"{job.job_id}: node {node_id} lacks resources for {g} GPUs")
            entries.append((i, g, cpus, mem))
        return tuple(entries)

    # -- mutation -------------------------------------------------------------
    def allocate(self, job, plan) -> "ClusterState":
        if job.job_id in self.allocations:
            raise ClusterError(f"job {job.job_id} already allocated")
        entries = self.check_plan(job, plan)
        for i, g, cpus, mem in entries:
            self.free_gpus[i] -= g
            self.free_cpus[i] -= cpus
            self.free_mem[i] -= mem
            self.node_jobs[i] += 1
        self.allocations[job.job_id] = (plan, entries)
        self.version += 1
        return self

    def release(self, job_id) -> "ClusterState":
        try:
            plan, entries = self.allocations.pop(job_id)
        except KeyError:
            raise ClusterError(f"unknown job {job_id}") from None
        for i, g, cpus, mem in entries:
            self.node_jobs[i] -= 1
            if self.node_jobs[i] == 0:
                # exact reset avoids float drift in memory
                self.free_gpus[i] = self.cap_gpus[i]
                self.free_cpus[i] = self.cap_cpus[i]
                self.free_mem[i] = self.cap_mem[i]
            else:
                self.free_gpus[i] += g
                self.free_cpus[i] += cpus
                self.free_mem[i] += mem
        self.version += 1
        return self

    def check_conservation(self, tol=1e-6):
        """Raise AssertionError if free + allocated differs from capacity anywhere."""
        used_g = np.zeros_like(self.cap_gpus)
        used_c = np.zeros_like(self.cap_cpus)
        used_m = np.zeros_like(self.cap_mem)
        for _, entries in self.allocations.values():
            for i, g, c, m in entries:
                used_g[i] += g
                used_c[i] += c
                used_m[i] += m
        assert np.array_equal(used_g + self.free_gpus, self.cap_gpus), "GPU conservation"
        assert np.array_equal(used_c + self.free_cpus, self.cap_cpus), "CPU conservation"
        assert np.allclose(used_m + self.free_mem, self.cap_mem, atol=tol), "memory conservation"
        assert (self.free_gpus >= 0).all() and (self.free_cpus >= 0).all()
        assert (self.free_mem >= -tol).all()


def build_cluster(spec: ClusterSpec) -> ClusterState:
    return ClusterState(spec)
