import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpusched.cluster import ClusterSpec, NodeSpec, PlacementPlan, build_cluster
from gpusched.features import (
    MAX_QUEUE_SIZE, build_state, cff, cff_of, dsr, dump_state, feature_table, future_avail,
    job_size, minmax, sample_features, urgency,
)
from gpusched.trace import JobRecord


def job(i, gpus=1, submit=0, rt=10, gpu_type="P100"):
    return JobRecord(f"j{i:04d}", "u", "default", submit, rt, rt, gpus, gpu_type)


def cluster(*frees, gpu_type="P100"):
    """Nodes of capacity 8 with the given free GPU counts."""
    nodes = tuple(NodeSpec(f"n{i}", gpu_type, 8, 64, 512) for i in range(len(frees)))
    state = build_cluster(ClusterSpec(nodes))
    for i, f in enumerate(frees):
        if f < 8:
            state.allocate(job(9000 + i, 8 - f), PlacementPlan(((f"n{i}", 8 - f),), "pack"))
    return state


@pytest.mark.parametrize("frees,expected", [((8,), 0.5), ((0,), 4.0), ((4,), 1.0)])
def test_dsr_examples(frees, expected):
    assert dsr(job(0, 4), cluster(*frees)) == pytest.approx(expected, abs=1e-9)


def test_dsr_ignores_other_types():
    nodes = (NodeSpec("p", "P100", 8, 64, 512), NodeSpec("v", "V100", 8, 64, 512))
    state = build_cluster(ClusterSpec(nodes))
    assert dsr(job(0, 4, gpu_type="V100"), state) == pytest.approx(0.5)


def test_future_avail_examples():
    state = cluster(8)
    j = job(1, 4)
    assert future_avail(j, state, [j]) == 4
    other = job(0, 8)
    assert future_avail(j, state, [other, j]) == -4
    # demand queued behind the job does not count
    assert future_avail(j, state, [j, other]) == 4


@pytest.mark.parametrize("free,expected", [([8], 0.0), ([4, 4], 0.5), ([1] * 8, 0.875), ([0, 0], 0.0)])
def test_cff_examples(free, expected):
    assert cff_of(free) == pytest.approx(expected, abs=1e-9)


def test_cff_of_state():
    assert cff(cluster(4, 4)) == pytest.approx(0.5, abs=1e-9)


def test_job_size_examples():
    q = [job(0, 1, rt=40), job(1, 2, rt=40), job(2, 3, rt=40)]
    assert job_size(q[1], q) == pytest.approx(0.5, abs=1e-9)
    assert job_size(q[2], q) == 1.0
    assert job_size(q[0], q[:1]) == 0.0


def test_urgency_examples():
    j = job(0, submit=0, rt=100)
    assert urgency(j, 0) == 0.0
    assert urgency(j, 100) == pytest.approx(0.5, abs=1e-9)
    vals = [urgency(j, t) for t in (10, 1e3, 1e6, 1e9)]
    assert all(a < b < 1 for a, b in zip(vals, vals[1:]))


def row(**kw):
    base = dict(req_gpus=0.5, req_time=0.5, wait=0.5, dsr=0.5, future_avail=0.5,
                cff=0.1, job_size=0.9, urgency=0.2, num_ways=1)
    base.update(kw)
    return base


def test_toggle_slot():
    assert sample_features(row(cff=0.8))[6] == pytest.approx(0.9)
    assert sample_features(row(cff=0.1))[6] == pytest.approx(0.2)


def test_ways_slot_prefers_more_ways():
    assert sample_features(row(num_ways=3))[7] > sample_features(row(num_ways=1))[7]


def test_build_state_padding():
    state = cluster(8, 8)
    q = [job(i, 1 + i % 3, submit=i) for i in range(3)]
    sm = build_state(q, state, now=10)
    assert sm.valid_rows == 3 and sm.ov.shape == (256, 8) and sm.cv.shape == (256, 5)
    assert not sm.ov[3:].any() and not sm.cv[3:].any()


def test_build_state_truncates_to_earliest():
    state = cluster(8)
    q = [job(i, 1, submit=300 - i) for i in range(300)]
    sm = build_state(q, state, now=400)
    assert sm.valid_rows == MAX_QUEUE_SIZE
    kept = {j.job_id for j in q if j.submit_time <= 256}
    assert set(sm.row_jobs) == kept


def test_build_state_empty():
    sm = build_state([], cluster(8), now=0)
    assert sm.valid_rows == 0 and not sm.ov.any() and not sm.cv.any()


def test_minmax_constant_column():
    assert minmax([3, 3, 3]).tolist() == [0, 0, 0]
    assert minmax([1, 2, 3]).tolist() == [0, 0.5, 1]


def test_table_matches_single_job_functions():
    state = cluster(8, 3, 5, 0)
    q = [job(i, g, submit=i, rt=10 * (i + 1)) for i, g in enumerate([4, 2, 8, 1, 16, 3])]
    t = feature_table(q, state, now=50)
    for r, j in enumerate(q):
        assert t["dsr"][r] == pytest.approx(dsr(j, state))
        assert t["future_avail"][r] == pytest.approx(future_avail(j, state, q))
        assert t["job_size"][r] == pytest.approx(job_size(j, q))
        assert t["urgency"][r] == pytest.approx(urgency(j, 50))
        assert t["num_ways_to_schedule"][r] == len(state.candidate_placements(j))
    assert len([k for k in t if k != "wait_time"]) == 17


def test_naive_layout_differs():
    state = cluster(8, 2)
    q = [job(i, 1 + i, submit=i) for i in range(4)]
    pro = build_state(q, state, now=10)
    naive = build_state(q, state, now=10, naive=True)
    assert not np.array_equal(pro.ov, naive.ov)
    np.testing.assert_array_equal(pro.cv, naive.cv)


def test_dump_state(tmp_path):
    state = cluster(8, 2)
    q = [job(i, 1 + i, submit=i) for i in range(4)]
    dump_state(q, state, 10, tmp_path / "table.csv", tmp_path / "state.csv")
    with open(tmp_path / "table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and "cff" in rows[0]
    assert len((tmp_path / "state.csv").read_text().splitlines()) == 1 + MAX_QUEUE_SIZE


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 8), min_size=1, max_size=6),
       st.lists(st.tuples(st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 500), st.integers(1, 5000)),
                min_size=0, max_size=40),
       st.booleans())
def test_state_entries_bounded(frees, jobs, naive):
    state = cluster(*frees)
    q = [job(i, g, submit=s, rt=r) for i, (g, s, r) in enumerate(jobs)]
    sm = build_state(q, state, now=600, naive=naive)
    assert sm.valid_rows == min(len(q), MAX_QUEUE_SIZE)
    for m in (sm.ov, sm.cv):
        assert np.isfinite(m).all() and m.min() >= 0.0 and m.max() <= 1.0
        assert not m[sm.valid_rows:].any()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 64), st.integers(1, 8))
def test_cff_grows_with_even_split(total, k):
    a = cff_of([total / k] * k)
    b = cff_of([total / (k + 1)] * (k + 1))
    assert a == pytest.approx(1 - 1 / k) and b > a
