import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpusched.nn import (
    MlpParams, NonFiniteGradient, OptState, adam_step, backward, forward, init_mlp, opt_from_dict,
    opt_to_dict, params_from_dict, params_to_dict, softmax,
)
from oracles import finite_difference_grads, max_relative_error


def test_init_deterministic_and_bounded():
    a, b = init_mlp([8, 64, 32, 1], seed=3), init_mlp([8, 64, 32, 1], seed=3)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
    assert all(not bias.any() for bias in a.biases)
    for w in a.weights:
        assert np.abs(w).max() <= np.sqrt(6.0 / w.shape[1])


def test_init_rejects_bad_sizes():
    with pytest.raises(ValueError):
        init_mlp([8], 0)
    with pytest.raises(ValueError):
        init_mlp([8, 0, 1], 0)


def test_forward_zero_and_identity():
    p = init_mlp([3, 4, 2], 0).zeros_like()
    y, _ = forward(p, np.array([1.0, -2.0, 3.0]))
    assert not y.any()
    ident = MlpParams([np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(forward(ident, x)[0], x)


def test_forward_pure_and_dimension_check():
    p = init_mlp([3, 4, 2], 1)
    x = np.array([0.1, 0.2, 0.3])
    np.testing.assert_array_equal(forward(p, x)[0], forward(p, x)[0])
    with pytest.raises(ValueError):
        forward(p, np.zeros(4))


def test_gradient_check_small_net():
    rng = np.random.default_rng(0)
    p = init_mlp([3, 4, 2], 5)
    x = rng.normal(size=3)
    c = rng.normal(size=2)
    _, cache = forward(p, x)
    grads, _ = backward(p, cache, c)
    assert max_relative_error(grads.arrays(), finite_difference_grads(p, x, c)) < 1e-4


def test_backward_zero_and_linear():
    p = init_mlp([3, 4, 2], 2)
    x = np.array([0.5, -0.5, 1.0])
    _, cache = forward(p, x)
    g0, dx0 = backward(p, cache, np.zeros(2))
    assert not g0.flat().any() and not dx0.any()
    g1, dx1 = backward(p, cache, np.array([0.3, -0.7]))
    g2, dx2 = backward(p, cache, np.array([0.6, -1.4]))
    np.testing.assert_allclose(g2.flat(), 2 * g1.flat(), rtol=1e-12)
    np.testing.assert_allclose(dx2, 2 * dx1, rtol=1e-12)
    with pytest.raises(ValueError):
        backward(p, cache, np.zeros(3))


def test_input_gradient_matches_differences():
    p = init_mlp([4, 5, 1], 9)
    x = np.array([0.1, 0.4, -0.3, 0.8])
    _, cache = forward(p, x)
    _, dx = backward(p, cache, np.ones(1))
    h = 1e-6
    num = [(forward(p, x + h * e)[0][0] - forward(p, x - h * e)[0][0]) / (2 * h) for e in np.eye(4)]
    np.testing.assert_allclose(dx, num, rtol=1e-6, atol=1e-9)


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(4)), 0.25)
    np.testing.assert_allclose(softmax(np.array([0.0, np.log(3.0)])), [0.25, 0.75], atol=1e-12)
    np.testing.assert_allclose(softmax(np.array([0.0, 100.0, 0.0]), np.array([True, False, True])),
                               [0.5, 0.0, 0.5], atol=1e-12)
    with pytest.raises(ValueError):
        softmax(np.zeros(2), np.zeros(2, dtype=bool))


def test_adam_examples():
    p = MlpParams([np.array([[1.0]])], [np.array([0.0])], "tanh")
    s = OptState.for_params(p, lr=0.1)
    grads = MlpParams([np.array([[1.0]])], [np.array([0.0])], "tanh")
    new, s1 = adam_step(p, grads, s)
    assert new.weights[0][0, 0] == pytest.approx(0.9, abs=1e-6)
    assert new.biases[0][0] == 0.0 and s1.step == 1
    again, _ = adam_step(p, grads, s)
    assert np.array_equal(again.flat(), new.flat())
    same, s2 = adam_step(p, p.zeros_like(), s)
    assert np.array_equal(same.flat(), p.flat()) and s2.step == 1
    bad = MlpParams([np.array([[np.nan]])], [np.array([0.0])], "tanh")
    with pytest.raises(NonFiniteGradient):
        adam_step(p, bad, s)


def test_serialisation_round_trip():
    p = init_mlp([5, 3, 2], 4, activation="relu")
    s = OptState.for_params(p, lr=0.01)
    _, cache = forward(p, np.ones(5))
    g, _ = backward(p, cache, np.ones(2))
    p2, s2 = adam_step(p, g, s)
    q = params_from_dict(params_to_dict(p2))
    assert np.array_equal(q.flat(), p2.flat()) and q.activation == "relu"
    t = opt_from_dict(opt_to_dict(s2), q)
    assert t.step == 1 and all(np.array_equal(a, b) for a, b in zip(t.m, s2.m))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 16), min_size=2, max_size=4), st.integers(0, 10**6),
       st.sampled_from(["tanh", "relu"]))
def test_gradients_match_differences(sizes, seed, activation):
    rng = np.random.default_rng(seed)
    p = init_mlp(sizes, seed, activation)
    x = rng.normal(size=(3, sizes[0]))
    c = rng.normal(size=(3, sizes[-1]))
    if activation == "relu":
        _, cache = forward(p, x)
        # skip inputs sitting on a kink, where differences are not defined
        if any(np.abs(z).min() < 1e-4 for z in cache["pre"][:-1]):
            return
    _, cache = forward(p, x)
    grads, _ = backward(p, cache, c)
    assert max_relative_error(grads.arrays(), finite_difference_grads(p, x, c)) < 1e-4


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=30), st.data())
def test_softmax_sums_to_one_and_respects_mask(z, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(z), max_size=len(z))))
    if not mask.any():
        mask[0] = True
    p = softmax(np.array(z), mask)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert not p[~mask].any() and (p >= 0).all()
