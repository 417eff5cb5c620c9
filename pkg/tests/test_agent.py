import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpusched import nn
from gpusched.agent import (
    ActorCritic, CheckpointError, PpoHyper, PriorityVector, TrainConfig, Trajectory, actor_priorities,
    compute_reward, critic_value, epoch_means, evaluate, init_agent, load_checkpoint, ppo_update,
    save_checkpoint, select_action, train,
)
from gpusched.cluster import parse_node_groups
from gpusched.features import MAX_QUEUE_SIZE, StateMatrix
from gpusched.sim import Decision
from gpusched.trace import GenConfig, synthesize_trace


def sm_from(rows, cv=None):
    rows = np.asarray(rows, dtype=float)
    n = len(rows)
    ov = np.zeros((MAX_QUEUE_SIZE, 8))
    ov[:n] = rows
    cvm = np.zeros((MAX_QUEUE_SIZE, 5))
    if cv is not None:
        cvm[:n] = cv
    return StateMatrix(ov, cvm, n, [f"j{i}" for i in range(n)])


def test_identical_rows_uniform():
    pv = actor_priorities(init_agent(0), sm_from([[0.3] * 8] * 5))
    np.testing.assert_allclose(pv.probs[:5], 0.2, atol=1e-12)
    assert not pv.probs[5:].any()


def test_single_row_certain():
    pv = actor_priorities(init_agent(0), sm_from([[0.1] * 8]))
    assert pv.probs[0] == 1.0


def test_no_rows_rejected():
    with pytest.raises(ValueError):
        actor_priorities(init_agent(0), sm_from(np.zeros((0, 8))))


def test_dominating_row_ranks_first():
    params = init_agent(0)
    for w in params.actor.weights:
        w[:] = np.abs(w)  # monotone increasing in every input
    rows = np.full((4, 8), 0.2)
    rows[2] += 0.5
    pv = actor_priorities(params, sm_from(rows))
    assert pv.ranking()[0] == 2


def test_critic_value_cases():
    params = init_agent(0)
    assert critic_value(params, sm_from(np.zeros((3, 8)))) == 0.0
    sm = sm_from(np.zeros((3, 8)), cv=np.random.default_rng(0).random((3, 5)))
    assert critic_value(params, sm) == critic_value(params, sm)
    full = StateMatrix(np.ones((256, 8)), np.ones((256, 5)), 256, [])
    assert np.isfinite(critic_value(params, full))


def test_select_action():
    pv = PriorityVector(np.array([0.2, 0.5, 0.3] + [0.0] * 253), 3)
    assert select_action(pv, "greedy") == 1
    a = [select_action(pv, "sample", np.random.default_rng(5)) for _ in range(3)]
    b = [select_action(pv, "sample", np.random.default_rng(5)) for _ in range(3)]
    assert a == b
    with pytest.raises(ValueError):
        select_action(PriorityVector(np.zeros(256), 0), "greedy")


def test_sample_frequencies_match():
    p = np.array([0.2, 0.5, 0.3])
    pv = PriorityVector(np.concatenate([p, np.zeros(253)]), 3)
    rng = np.random.default_rng(11)
    n = 100_000
    draws = rng.choice(3, size=n, p=p)  # same routine select_action uses
    counts = np.bincount(draws, minlength=3)
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)
    one = np.bincount([select_action(pv, "sample", rng) for _ in range(3000)], minlength=3) / 3000
    np.testing.assert_allclose(one, p, atol=0.04)


@pytest.mark.parametrize("abs_s,ars_s,expected", [(1000, 800, 0.2), (500, 500, 0.0), (0, 0, 0.0)])
def test_reward_examples(abs_s, ars_s, expected):
    assert compute_reward(abs_s, ars_s) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_reward_sign(abs_s, ars_s):
    r = compute_reward(abs_s, ars_s)
    assert (r > 0) == (ars_s < abs_s)


def _decision(params, rows, action, value=0.0, logp_shift=0.0):
    sm = sm_from(rows)
    pv = actor_priorities(params, sm)
    n = sm.valid_rows
    return Decision(sm.ov[:n].copy(), sm.cv[:n].copy(), n, action,
                    float(np.log(pv.probs[action])) + logp_shift, value)


def test_clipped_surrogate_value():
    params = init_agent(0)
    rows = [[0.1] * 8, [0.9] * 8]
    d = _decision(params, rows, 0, value=0.0, logp_shift=-np.log(1.5))  # ratio 1.5
    _, diag = ppo_update(params, [Trajectory([d], 1.0)],
                         PpoHyper(epochs=1, ent_coef=0.0, pi_lr=1e-9, vf_lr=1e-9))
    assert diag["pi_loss"] == pytest.approx(-1.2, abs=1e-9)
    assert diag["clip_frac"] == 1.0


def test_zero_advantage_no_entropy_keeps_params():
    params = init_agent(3)
    rows = np.random.default_rng(0).random((6, 8))
    sm = sm_from(rows)
    v = critic_value(params, sm)
    d = _decision(params, rows, 2, value=v)
    new, diag = ppo_update(params, [Trajectory([d], v)], PpoHyper(ent_coef=0.0))
    assert diag["pi_loss"] == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(new.actor.flat(), params.actor.flat())
    np.testing.assert_array_equal(new.critic.flat(), params.critic.flat())


def test_bandit_update_prefers_better_action():
    params = init_agent(1)
    rows = [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8], [0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]]
    before = actor_priorities(params, sm_from(rows)).probs[0]
    good = Trajectory([_decision(params, rows, 0)], 1.0)
    bad = Trajectory([_decision(params, rows, 1)], -1.0)
    new, _ = ppo_update(params, [good, bad], PpoHyper(pi_lr=1e-2, epochs=1))
    assert actor_priorities(new, sm_from(rows)).probs[0] > before


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_update_aborts():
    params = init_agent(0)
    d = _decision(params, [[0.1] * 8, [0.2] * 8], 0)
    new, diag = ppo_update(params, [Trajectory([d], float("inf"))], PpoHyper())
    assert diag["aborted"] and new is params


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(0, 10**6))
def test_priorities_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    params = init_agent(seed % 7)
    rows = rng.random((n, 8))
    perm = rng.permutation(n)
    a = actor_priorities(params, sm_from(rows)).probs[:n]
    b = actor_priorities(params, sm_from(rows[perm])).probs[:n]
    np.testing.assert_allclose(b, a[perm], atol=1e-12)
    assert abs(a.sum() - 1) < 1e-9


def test_hyper_validation():
    with pytest.raises(ValueError):
        PpoHyper(clip=1.0)
    with pytest.raises(ValueError):
        PpoHyper(pi_lr=-1)


SPEC = parse_node_groups("2 x V100:8:64:512")
TRACE = synthesize_trace(GenConfig(job_count=600, arrival_rate=0.01, runtime_mean=1200, seed=2,
                                   gpu_demand_weights=(0.5, 0.3, 0.2, 0.0, 0.0)))


def small_cfg(**kw):
    base = dict(epochs=2, batches_per_epoch=3, batch_size=48, seed=4, hyper=PpoHyper(pi_lr=1e-3))
    base.update(kw)
    return TrainConfig(TRACE, SPEC, "fifo", "wait", **base)


def test_train_curve_and_determinism():
    p1, c1 = train(small_cfg())
    p2, c2 = train(small_cfg())
    assert len(c1) == 6 and c1 == c2
    np.testing.assert_array_equal(p1.actor.flat(), p2.actor.flat())
    assert len(epoch_means(c1)) == 2


def test_train_zero_lr_is_frozen():
    cfg = small_cfg(hyper=PpoHyper(pi_lr=0.0, vf_lr=0.0), epochs=1)
    p0 = init_agent(cfg.seed, cfg.hyper)
    p, _ = train(cfg)
    np.testing.assert_array_equal(p.actor.flat(), p0.actor.flat())


def test_train_resume_matches_uninterrupted():
    full, c_full = train(small_cfg(epochs=1))
    part, c_a = train(small_cfg(epochs=1, batches_per_epoch=2))
    resumed, c_b = train(small_cfg(epochs=1), params=part, start=(0, 2))
    assert c_a + c_b == c_full
    np.testing.assert_array_equal(resumed.actor.flat(), full.actor.flat())


def test_checkpoint_round_trip_and_layout_guard(tmp_path):
    params, _ = train(small_cfg(epochs=1, batches_per_epoch=1))
    save_checkpoint(params, tmp_path / "ck.json", {"base_policy": "fifo"})
    back, meta = load_checkpoint(tmp_path / "ck.json", expected_layout=params.layout)
    np.testing.assert_array_equal(back.actor.flat(), params.actor.flat())
    assert back.actor_opt.step == params.actor_opt.step and meta == {"base_policy": "fifo"}
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck.json", expected_layout="naive-ov8-v1")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")


def test_evaluate_paired_and_cross_policy():
    params = init_agent(0)
    a = evaluate(params, TRACE, SPEC, "fifo", "wait", runs=2, batch_size=48, seed=1)
    b = evaluate(params, TRACE, SPEC, "fifo", "wait", runs=2, batch_size=48, seed=1)
    a.pop("timing"), b.pop("timing")
    assert a == b and len(a["per_run"]) == 2
    c = evaluate(params, TRACE, SPEC, "wfp3", "wait", runs=1, batch_size=48, seed=1)
    assert c["base_policy"] == "wfp3"
    assert set(c["mean"]["improvement"]) == {"wait", "jct", "bsld", "utilization"}


def test_naive_agent_trains():
    p, curve = train(small_cfg(epochs=1, batches_per_epoch=1, naive=True))
    assert p.naive and p.layout == "naive-ov8-v1" and len(curve) == 1
