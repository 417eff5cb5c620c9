"""Spread-vs-pack allocation as a small 0-1 program, solved exactly.

A binary selector ``x`` ties the occupancy matrix (node x GPU-slot) to one
of two candidate ways: ``way1`` (spreading, x = 0) or ``way2`` (packing,
x = 1).  Occupancy must respect free GPUs, CPUs and memory per node and
the objective maximises total occupancy.  Because the selector fixes the
whole occupancy pattern, the program splits into one feasibility check per
way; ``brute_force_oracle`` enumerates occupancy settings to confirm this.

Ties in the objective (both ways occupy the job's GPU count) are broken by
(1) lower fragmentation of the job's node pool afterwards, (2) more
look-ahead jobs still fitting afterwards, (3) packing.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cluster import MEM_EPS, ClusterState, PlacementPlan
from .features import cff_of

DEFAULT_K = 16
ORACLE_MAX_NODES = 8
ORACLE_MAX_SLOTS = 8


@dataclass
class AllocProblem:
    job: object
    way1: Optional[PlacementPlan]  # spreading
    way2: Optional[PlacementPlan]  # packing
    state: ClusterState
    lookahead_jobs: tuple = ()

    def ways(self):
        return [(name, w) for name, w in (("way1", self.way1), ("way2", self.way2)) if w is not None]

    def nodes(self):
        """Union of nodes named by either way, in cluster order."""
        ids = {n for _, w in self.ways() for n, _ in w.assignments}
        return sorted(ids, key=self.state.index.__getitem__)


@dataclass
class AllocSolution:
    selected_way: Optional[str]
    plan: Optional[PlacementPlan]
    nodes: list = field(default_factory=list)
    occupancy: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=bool))
    objective: int = 0
    feasible: bool = False
    lookahead_fit: int = 0
    cff_after: float = 0.0

    def to_dict(self):
        return {"selected_way": self.selected_way,
                "plan": None if self.plan is None else self.plan.to_list(),
                "nodes": self.nodes, "occupancy": self.occupancy.astype(int).tolist(),
                "objective": self.objective, "feasible": self.feasible,
                "lookahead_fit": self.lookahead_fit, "cff_after": self.cff_after}


def _validate(p: AllocProblem):
    for name, w in p.ways():
        if w.total_gpus != p.job.requested_gpus:
            raise ValueError(f"{name} totals {w.total_gpus} GPUs, job requests "
                             f"{p.job.requested_gpus}")


def _occupancy(p, counts):
    nodes = p.nodes()
    slots = max([int(p.state.cap_gpus[p.state.index[n]]) for n in nodes], default=0)
    occ = np.zeros((len(nodes), slots), dtype=bool)
    for r, n in enumerate(nodes):
        occ[r, :counts.get(n, 0)] = True
    return nodes, occ


def _way_feasible(state, job, way) -> bool:
    for node_id, g in way.assignments:
        i = state.index[node_id]
        cpus, mem = state.demand(job, g)
        if g > state.free_gpus[i] or cpus > state.free_cpus[i] or mem > state.free_mem[i] + MEM_EPS:
            return False
    return True


def _after(p, way):
    """(look-ahead jobs that still fit, pool fragmentation) after placing ``way``."""
    work = p.state.copy()
    work.allocate(p.job, way)
    frag = cff_of(work.free_gpus[work.eligible(p.job)])
    fit = 0
    for j in p.lookahead_jobs:
        cands = work.candidate_placements(j)
        if cands:
            work.allocate(j, cands[0])
            fit += 1
    return fit, frag


def _pick(p, scored):
    """``scored``: list of (name, way, objective).  Returns the winner with its tie-break data."""
    best_obj = max(o for _, _, o in scored)
    tied = [(n, w) for n, w, o in scored if o == best_obj]
    ranked = []
    for name, way in tied:
        fit, frag = _after(p, way) if len(tied) > 1 else (None, None)
        ranked.append(((frag or 0.0, -(fit or 0), 0 if name == "way2" else 1), name, way, fit, frag))
    ranked.sort(key=lambda r: r[0])
    _, name, way, fit, frag = ranked[0]
    if fit is None:
        fit, frag = _after(p, way)
    return name, way, best_obj, fit, frag


def _solution(p, name, way, objective, fit, frag):
    nodes, occ = _occupancy(p, dict(way.assignments))
    return AllocSolution(name, way, nodes, occ, objective, True, fit, frag)


def solve(p: AllocProblem) -> AllocSolution:
    """Exact optimum: evaluate both settings of the selector."""
    _validate(p)
    scored = [(name, w, w.total_gpus) for name, w in p.ways() if _way_feasible(p.state, p.job, w)]
    if not scored:
        nodes, occ = _occupancy(p, {})
        return AllocSolution(None, None, nodes, occ, 0, False)
    return _solution(p, *_pick(p, scored))


def brute_force_oracle(p: AllocProblem) -> AllocSolution:
    """Enumerate the selector and every per-node occupancy count on the named nodes."""
    _validate(p)
    nodes = p.nodes()
    st = p.state
    caps = [int(st.cap_gpus[st.index[n]]) for n in nodes]
    if len(nodes) > ORACLE_MAX_NODES or any(c > ORACLE_MAX_SLOTS for c in caps):
        raise ValueError("instance too large for the brute-force oracle")
    idx = [st.index[n] for n in nodes]
    free_g = np.array([st.free_gpus[i] for i in idx])
    free_c = np.array([st.free_cpus[i] for i in idx])
    free_m = np.array([st.free_mem[i] for i in idx])
    grid = np.array(list(itertools.product(*[range(c + 1) for c in caps])), dtype=np.int64)
    if grid.ndim == 1:
        grid = grid.reshape(-1, len(nodes))
    # per-count resource demand, tabulated for 0..max slots
    cpu_tab = np.array([st.demand(p.job, g)[0] if g else 0 for g in range(max(caps, default=0) + 1)])
    mem_tab = np.array([st.demand(p.job, g)[1] if g else 0.0 for g in range(max(caps, default=0) + 1)])
    ok_res = ((grid <= free_g) & (cpu_tab[grid] <= free_c)
              & (mem_tab[grid] <= free_m + MEM_EPS)).all(axis=1)

    scored = []
    ways = dict(p.ways())
    for x in (0, 1):
        name = "way2" if x else "way1"
        sel = ways.get(name)
        if sel is None:
            continue
        other = ways.get("way1" if x else "way2")
        target = np.zeros(len(nodes), dtype=np.int64)
        pinned = np.zeros(len(nodes), dtype=bool)
        if other is not None:
            for n, _ in other.assignments:  # other way's slots take value 0
                pinned[nodes.index(n)] = True
        for n, g in sel.assignments:  # selected way's slots take value 1
            target[nodes.index(n)] = g
            pinned[nodes.index(n)] = True
        consistent = ok_res & (grid[:, pinned] == target[pinned]).all(axis=1)
        if consistent.any():
            best = int(grid[consistent].sum(axis=1).max())
            scored.append((name, sel, best))
    if not scored:
        nodes_, occ = _occupancy(p, {})
        return AllocSolution(None, None, nodes_, occ, 0, False)
    return _solution(p, *_pick(p, scored))


def choose_ways(cands):
    """Narrowest candidate as the packing way, widest as the spreading way."""
    if not cands:
        return None, None
    narrow = min(cands, key=lambda c: c.width)
    wide = max(cands, key=lambda c: c.width)
    if wide is narrow or wide.width == narrow.width:
        return None, narrow
    return wide, narrow


def problem_for(job, state, lookahead=()) -> Optional[AllocProblem]:
    way1, way2 = choose_ways(state.candidate_placements(job))
    if way2 is None:
        return None
    return AllocProblem(job, way1, way2, state, tuple(lookahead))


def allocate_head(job, state, lookahead=(), debug_sink=None) -> Optional[AllocSolution]:
    """Pick a plan for one job; the solver only runs when two distinct ways exist."""
    p = problem_for(job, state, lookahead)
    if p is None:
        return None
    if p.way1 is None:
        nodes, occ = _occupancy(p, dict(p.way2.assignments))
        sol = AllocSolution("way2", p.way2, nodes, occ, p.way2.total_gpus, True)
    else:
        sol = solve(p)
        if debug_sink is not None:
            debug_sink.write(dump_pair(p, sol) + "\n")
    return sol


def lookahead_allocate(ranked_jobs, state, k=DEFAULT_K, debug_sink=None) -> list:
    """Allocate the top-``k`` jobs in rank order against a working copy of ``state``.

    Returns ``[(job, AllocSolution or None)]``; None marks a job left queued.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    work = state.copy()
    top = list(ranked_jobs)[:k]
    out = []
    for i, job in enumerate(top):
        sol = allocate_head(job, work, top[i + 1:], debug_sink)
        if sol is not None and sol.feasible:
            work.allocate(job, sol.plan)
            out.append((job, sol))
        else:
            out.append((job, None))
    return out


def dump_pair(p: AllocProblem, sol: AllocSolution) -> str:
    st = p.state
    nodes = p.nodes()
    prob = {
        "job": p.job.job_id, "requested_gpus": p.job.requested_gpus,
        "way1": None if p.way1 is None else p.way1.to_list(),
        "way2": None if p.way2 is None else p.way2.to_list(),
        "free": {n: [int(st.free_gpus[st.index[n]]), int(st.free_cpus[st.index[n]]),
                     float(st.free_mem[st.index[n]])] for n in nodes},
        "lookahead": [j.job_id for j in p.lookahead_jobs],
    }
    return json.dumps({"problem": prob, "solution": sol.to_dict()}, sort_keys=True)
