"""Actor-critic prioritiser, dual-pipeline reward and clipped-surrogate PPO training."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .cluster import ClusterSpec
from .io import atomic_write_text
from .features import CV_WIDTH, LAYOUT_VERSION, MAX_QUEUE_SIZE, OV_WIDTH, StateMatrix
from .metrics import METRICS
from .policies import PolicyKind
from .sim import SimConfig, run_episode
from .trace import TraceSet, sample_batch

ACTOR_SIZES = (OV_WIDTH, 32, 16, 1)
CRITIC_SIZES = (MAX_QUEUE_SIZE * CV_WIDTH, 64, 32, 1)
CHECKPOINT_VERSION = 1
REWARD_EPS = 1e-6


class CheckpointError(ValueError):
    pass


@dataclass
class PpoHyper:
    clip: float = 0.2
    pi_lr: float = 1e-4
    vf_lr: float = 1e-3
    epochs: int = 4
    minibatch: int = 256
    ent_coef: float = 0.01
    vf_coef: float = 1.0

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.pi_lr < 0 or self.vf_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.minibatch < 1:
            raise ValueError("epochs and minibatch must be positive")


@dataclass
class AgentParams:
    actor: nn.MlpParams
    critic: nn.MlpParams
    actor_opt: nn.OptState
    critic_opt: nn.OptState
    naive: bool = False

    @property
    def layout(self):
        return LAYOUT_VERSION[self.naive]

    def copy(self):
        return AgentParams(self.actor.copy(), self.critic.copy(), self.actor_opt.copy(),
                           self.critic_opt.copy(), self.naive)


def init_agent(seed, hyper: Optional[PpoHyper] = None, naive=False) -> AgentParams:
    hyper = hyper or PpoHyper()
    ss = np.random.SeedSequence(seed).spawn(2)
    actor = nn.init_mlp(ACTOR_SIZES, ss[0], "tanh", out_scale=0.1)
    critic = nn.init_mlp(CRITIC_SIZES, ss[1], "tanh", out_scale=0.1)
    return AgentParams(actor, critic, nn.OptState.for_params(actor, lr=hyper.pi_lr),
                       nn.OptState.for_params(critic, lr=hyper.vf_lr), naive)


# -- inference ------------------------------------------------------------------

@dataclass
class PriorityVector:
    probs: np.ndarray  # (MAX_QUEUE_SIZE,), zero on padded rows
    valid_rows: int

    def ranking(self):
        p = self.probs[:self.valid_rows]
        return sorted(range(self.valid_rows), key=lambda r: (-p[r], r))


def _logits(actor, ov_rows):
    y, _ = nn.forward(actor, ov_rows)
    return y[:, 0]


def actor_priorities(params: AgentParams, sm: StateMatrix) -> PriorityVector:
    if sm.valid_rows == 0:
        raise ValueError("no valid rows: nothing to prioritise")
    n = sm.valid_rows
    probs = np.zeros(sm.ov.shape[0])
    probs[:n] = nn.softmax(_logits(params.actor, sm.ov[:n]))
    return PriorityVector(probs, n)


def critic_value(params: AgentParams, sm: StateMatrix) -> float:
    y, _ = nn.forward(params.critic, sm.cv.ravel())
    return float(y[0])


def select_action(pv: PriorityVector, mode, rng=None) -> int:
    n = pv.valid_rows
    if n == 0:
        raise ValueError("empty action set")
    p = pv.probs[:n]
    if mode == "greedy":
        return int(np.argmax(p))  # first maximum = earliest submitter
    if mode == "sample":
        return int(rng.choice(n, p=p / p.sum()))
    raise ValueError(f"unknown mode {mode!r}")


class ActorCritic:
    """Decision hook handed to the simulator: state matrix -> (priorities, value)."""

    def __init__(self, params: AgentParams):
        self.params = params

    def evaluate(self, sm: StateMatrix):
        pv = actor_priorities(self.params, sm)
        return pv.probs, critic_value(self.params, sm)


def compute_reward(abs_score, ars_score) -> float:
    """Normalised improvement of the RL score over the baseline (lower-is-better scores)."""
    return (abs_score - ars_score) / max(abs(abs_score), REWARD_EPS)


# -- PPO --------------------------------------------------------------------------

@dataclass
class Trajectory:
    decisions: list  # sim.Decision
    reward: float


def _segments(trajs):
    decs, rewards = [], []
    for tr in trajs:
        for d in tr.decisions:
            decs.append(d)
            rewards.append(tr.reward)
    return decs, np.asarray(rewards, dtype=np.float64)


def _segment_softmax(z, starts, lengths):
    seg = np.repeat(np.arange(len(starts)), lengths)
    zmax = np.maximum.reduceat(z, starts)
    e = np.exp(z - zmax[seg])
    tot = np.add.reduceat(e, starts)
    pi = e / tot[seg]
    lse = zmax + np.log(tot)
    return pi, lse, seg


def ppo_update(params: AgentParams, trajectories, hyper: PpoHyper, rng=None):
    """One PPO update from trajectories with broadcast terminal rewards.

    Returns ``(new_params, diagnostics)``; on a non-finite loss the old
    parameters come back unchanged with ``diagnostics["aborted"] = True``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    decs, R = _segments(trajectories)
    if not decs:
        raise ValueError("no decisions to learn from")
    D = len(decs)
    lengths_all = np.array([d.valid_rows for d in decs])
    offsets = np.concatenate([[0], np.cumsum(lengths_all)[:-1]])
    ov_all = np.concatenate([d.ov for d in decs])
    cv_all = np.zeros((D, MAX_QUEUE_SIZE * CV_WIDTH))
    for k, d in enumerate(decs):
        cv_all[k, :d.cv.size] = d.cv.ravel()
    actions = np.array([d.action for d in decs])
    logp_old = np.array([d.logp for d in decs])
    adv = R - np.array([d.value for d in decs])

    new = params.copy()
    new.actor_opt.lr = hyper.pi_lr
    new.critic_opt.lr = hyper.vf_lr
    stats = {"pi_loss": [], "v_loss": [], "entropy": [], "ratio": [], "clip_frac": []}
    for _ in range(hyper.epochs):
        perm = rng.permutation(D)
        for s in range(0, D, hyper.minibatch):
            mb = perm[s:s + hyper.minibatch]
            B = len(mb)
            lengths = lengths_all[mb]
            rows = np.concatenate([np.arange(offsets[k], offsets[k] + lengths_all[k]) for k in mb])
            starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])

            y, cache = nn.forward(new.actor, ov_all[rows])
            z = y[:, 0]
            pi, lse, seg = _segment_softmax(z, starts, lengths)
            a_rows = starts + actions[mb]
            logp = z[a_rows] - lse
            ratio = np.exp(logp - logp_old[mb])
            A = adv[mb]
            lo, hi = 1 - hyper.clip, 1 + hyper.clip
            surr = np.minimum(ratio * A, np.clip(ratio, lo, hi) * A)
            pi_loss = -surr.mean()
            logpi = np.log(np.maximum(pi, 1e-300))
            ent = -np.add.reduceat(pi * logpi, starts)
            clipped = ((A > 0) & (ratio > hi)) | ((A < 0) & (ratio < lo))

            # d(pi_loss)/d(logp) on the active branch; zero where the clip binds
            g_logp = np.where(clipped, 0.0, -ratio * A / B)
            dz = -pi * g_logp[seg]
            dz[a_rows] += g_logp
            # entropy bonus: loss -= c * mean(H)
            dz += hyper.ent_coef / B * pi * (logpi + ent[seg])

            v, vcache = nn.forward(new.critic, cv_all[mb])
            v = v[:, 0]
            v_err = v - R[mb]
            v_loss = 0.5 * np.mean(v_err ** 2)
            loss = pi_loss + hyper.vf_coef * v_loss - hyper.ent_coef * ent.mean()
            if not math.isfinite(loss):
                return params, {"aborted": True}

            g_actor, _ = nn.backward(new.actor, cache, dz[:, None])
            g_critic, _ = nn.backward(new.critic, vcache, (hyper.vf_coef * v_err / B)[:, None])
            try:
                new.actor, new.actor_opt = nn.adam_step(new.actor, g_actor, new.actor_opt)
                new.critic, new.critic_opt = nn.adam_step(new.critic, g_critic, new.critic_opt)
            except nn.NonFiniteGradient:
                return params, {"aborted": True}
            stats["pi_loss"].append(pi_loss)
            stats["v_loss"].append(v_loss)
            stats["entropy"].append(float(ent.mean()))
            stats["ratio"].append(float(ratio.mean()))
            stats["clip_frac"].append(float(clipped.mean()))
    diag = {k: float(np.mean(v)) for k, v in stats.items()}
    diag["aborted"] = False
    diag["decisions"] = D
    return new, diag


# -- checkpoints -------------------------------------------------------------------

def checkpoint_dict(params: AgentParams, meta=None) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layout": params.layout,
        "naive": params.naive,
        "actor": nn.params_to_dict(params.actor),
        "critic": nn.params_to_dict(params.critic),
        "actor_opt": nn.opt_to_dict(params.actor_opt),
        "critic_opt": nn.opt_to_dict(params.critic_opt),
        "meta": meta or {},
    }


def save_checkpoint(params: AgentParams, path, meta=None):
    atomic_write_text(path, json.dumps(checkpoint_dict(params, meta), sort_keys=True))


def load_checkpoint(path, expected_layout=None):
    """Return ``(params, meta)``; the OV layout must match when ``expected_layout`` is given."""
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return params_from_checkpoint(d, expected_layout), d.get("meta", {})


def params_from_checkpoint(d, expected_layout=None) -> AgentParams:
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')}")
    if d["layout"] not in LAYOUT_VERSION.values():
        raise CheckpointError(f"unknown observation layout {d['layout']!r}")
    if expected_layout is not None and d["layout"] != expected_layout:
        raise CheckpointError(f"checkpoint layout {d['layout']!r} != expected {expected_layout!r}")
    actor = nn.params_from_dict(d["actor"])
    critic = nn.params_from_dict(d["critic"])
    if tuple(actor.sizes) != ACTOR_SIZES or tuple(critic.sizes) != CRITIC_SIZES:
        raise CheckpointError("network shapes do not match the state matrix")
    return AgentParams(actor, critic, nn.opt_from_dict(d["actor_opt"], actor),
                       nn.opt_from_dict(d["critic_opt"], critic), bool(d["naive"]))


# -- training and evaluation ----------------------------------------------------------

@dataclass
class TrainConfig:
    trace: TraceSet
    cluster: ClusterSpec
    base_policy: PolicyKind = PolicyKind.FIFO
    metric: str = "wait"
    epochs: int = 20
    batches_per_epoch: int = 100
    batch_size: int = 256
    hyper: PpoHyper = field(default_factory=PpoHyper)
    seed: int = 0
    naive: bool = False
    use_allocator: Optional[bool] = None  # defaults to "not naive"
    k: int = 16
    backfill: bool = True
    runtime_source: str = "actual"
    tau: float = 10.0

    def __post_init__(self):
        self.base_policy = PolicyKind.parse(self.base_policy)
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.use_allocator is None:
            self.use_allocator = not self.naive
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs and batches_per_epoch must be positive")


def _sim_configs(metric, policy, runtime_source, mode, naive, use_allocator, k, backfill, tau,
                 seed):
    base = SimConfig(scheduler="base", policy=policy, feature_runtime_source=runtime_source,
                     backfill=backfill, k=k, metric=metric, seed=seed, tau=tau)
    rl = SimConfig(scheduler="rl", policy=policy, feature_runtime_source=runtime_source,
                   backfill=backfill, k=k, metric=metric, seed=seed, action_mode=mode,
                   naive=naive, use_allocator=use_allocator, tau=tau)
    return base, rl


def _batch_seeds(seed, *path):
    ss = np.random.SeedSequence([seed, *path])
    a, b, c = ss.spawn(3)
    return (int(a.generate_state(1)[0]), np.random.default_rng(b), np.random.default_rng(c))


CURVE_FIELDS = ("epoch", "batch", "reward", "abs", "ars", "pi_loss", "v_loss", "entropy",
                "clip_frac", "mean_ratio", "decisions")


def train(cfg: TrainConfig, params: Optional[AgentParams] = None, start=(0, 0), progress=None):
    """Dual-pipeline PPO training; returns ``(params, curve_rows)``.

    ``start = (epoch, batch)`` resumes a run: every batch draws its seeds from
    ``(seed, epoch, batch)``, so a resumed run matches an uninterrupted one.
    """
    params = params or init_agent(cfg.seed, cfg.hyper, cfg.naive)
    if params.naive != cfg.naive:
        raise CheckpointError("checkpoint layout does not match the naive flag")
    curve = []
    for epoch in range(cfg.epochs):
        for b in range(cfg.batches_per_epoch):
            if (epoch, b) < tuple(start):
                continue
            batch_seed, act_rng, upd_rng = _batch_seeds(cfg.seed, epoch, b)
            batch = sample_batch(cfg.trace, cfg.batch_size, batch_seed)
            base_cfg, rl_cfg = _sim_configs(cfg.metric, cfg.base_policy, cfg.runtime_source,
                                            "sample", cfg.naive, cfg.use_allocator, cfg.k,
                                            cfg.backfill, cfg.tau, cfg.seed)
            base_res = run_episode(batch, cfg.cluster, base_cfg)
            rl_res = run_episode(batch, cfg.cluster, rl_cfg, ActorCritic(params), act_rng)
            abs_s, ars_s = base_res.score(cfg.metric), rl_res.score(cfg.metric)
            reward = compute_reward(abs_s, ars_s)
            traj = Trajectory(rl_res.decisions, reward)
            if rl_res.decisions:
                params, diag = ppo_update(params, [traj], cfg.hyper, upd_rng)
            else:
                diag = {}
            row = {"epoch": epoch, "batch": b, "reward": reward, "abs": abs_s, "ars": ars_s,
                   "pi_loss": diag.get("pi_loss", 0.0), "v_loss": diag.get("v_loss", 0.0),
                   "entropy": diag.get("entropy", 0.0), "clip_frac": diag.get("clip_frac", 0.0),
                   "mean_ratio": diag.get("ratio", 1.0), "decisions": len(rl_res.decisions)}
            curve.append(row)
            if progress is not None:
                progress(row, params)
    return params, curve


def epoch_means(curve) -> list:
    by = {}
    for r in curve:
        by.setdefault(r["epoch"], []).append(r["reward"])
    return [float(np.mean(by[e])) for e in sorted(by)]


def improvement(base, rl, metric) -> float:
    """Percent improvement of RL over the baseline (positive = RL better)."""
    if metric == "utilization":
        return 100.0 * (rl - base) / base if base else 0.0
    return 100.0 * (base - rl) / base if base else 0.0


def evaluate(params: AgentParams, trace: TraceSet, cluster: ClusterSpec, base_policy="fifo",
             metric="wait", runs=10, batch_size=1024, seed=0, k=16, backfill=True, tau=10.0,
             use_allocator=None, runtime_source="requested") -> dict:
    """Paired greedy evaluation; every run replays one sampled batch through both pipelines.

    Wall-clock totals sit under ``"timing"``; everything else is deterministic.
    """
    policy = PolicyKind.parse(base_policy)
    use_allocator = (not params.naive) if use_allocator is None else use_allocator
    decider = ActorCritic(params)
    per_run = []
    timing = {"base_s": 0.0, "rl_s": 0.0}
    for r in range(runs):
        batch_seed, _, _ = _batch_seeds(seed, 1_000_000 + r)
        batch = sample_batch(trace, min(batch_size, len(trace)), batch_seed)
        base_cfg, rl_cfg = _sim_configs(metric, policy, runtime_source, "greedy", params.naive,
                                        use_allocator, k, backfill, tau, seed)
        base_res = run_episode(batch, cluster, base_cfg)
        rl_res = run_episode(batch, cluster, rl_cfg, decider)
        timing["base_s"] += base_res.wall_time
        timing["rl_s"] += rl_res.wall_time
        b, l = base_res.summary(), rl_res.summary()
        per_run.append({
            "run": r, "batch_seed": batch_seed, "first_job": batch[0].job_id,
            "base": b, "rl": l,
            "improvement": {m: improvement(b[m], l[m], m) for m in METRICS},
            "reward": compute_reward(base_res.score(metric), rl_res.score(metric)),
        })
    mean = {side: {m: float(np.mean([p[side][m] for p in per_run])) for m in METRICS}
            for side in ("base", "rl")}
    mean["improvement"] = {m: improvement(mean["base"][m], mean["rl"][m], m) for m in METRICS}
    return {"base_policy": policy.value, "metric": metric, "runs": runs,
            "batch_size": batch_size, "seed": seed, "layout": params.layout,
            "mean": mean, "per_run": per_run, "timing": timing}
