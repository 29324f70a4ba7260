import numpy as np
import pytest

from networks.bp_lambda import (
    LambdaRangeError,
    LambdaSchedule,
    check_lambda,
    fold_chain,
    fold_recurrent,
    geometric_weights,
    mix_step,
    recurrent_mix_step,
    unrolled_target,
)
from utils.utils_numerics import make_rng


def linear_chain(rng, depth=3, width=4):
    maps = [rng.standard_normal((width, width)) for _ in range(depth)]
    return maps, [lambda g, A=A: g @ A for A in maps]


def test_check_lambda_range():
    assert check_lambda(0.0) == 0.0
    with pytest.raises(LambdaRangeError):
        check_lambda(1.5)
    with pytest.raises(LambdaRangeError):
        LambdaSchedule.constant(-0.1, 3)


def test_truncation_schedule():
    schedule = LambdaSchedule.truncation(3)
    assert [schedule(k) for k in range(1, 8)] == [1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0]


def test_mix_step_endpoints(rng):
    g = rng.standard_normal((2, 3))
    synth = rng.standard_normal((2, 3))
    double = lambda v: 2.0 * v  # noqa: E731
    np.testing.assert_array_equal(mix_step(g, double, synth, 1.0), 2.0 * g)
    np.testing.assert_array_equal(mix_step(g, double, synth, 0.0), synth)
    np.testing.assert_allclose(mix_step(g, double, synth, 0.25), 0.5 * g + 0.75 * synth)


def test_mix_step_lambda_zero_skips_backward(rng):
    calls = []
    mix_step(np.ones(2), lambda v: calls.append(v) or v, np.zeros(2), 0.0)
    assert calls == []


def test_recurrent_mix_at_sequence_end(rng):
    dl = rng.standard_normal((2, 3))
    synth = rng.standard_normal((2, 3))
    np.testing.assert_allclose(recurrent_mix_step(dl, None, None, synth, 0.0), dl + synth)
    np.testing.assert_allclose(recurrent_mix_step(dl, None, None, synth, 1.0), dl)


def test_unrolled_target_is_detached(rng):
    target = unrolled_target(np.ones((1, 2)), lambda v: 3.0 * v)
    np.testing.assert_array_equal(target, [[3.0, 3.0]])
    assert not target.flags.writeable


@pytest.mark.parametrize("seed", range(20))
def test_fold_chain_lambda_one_is_backprop(seed):
    rng = make_rng(seed)
    maps, jvps = linear_chain(rng)
    top = rng.standard_normal((2, 4))
    synthetic = [rng.standard_normal((2, 4)) for _ in maps]
    states = fold_chain(top, jvps, synthetic, LambdaSchedule.constant(1.0, len(maps)))
    expected = top
    for state, A in zip(states[1:], reversed(maps)):
        expected = expected @ A
        np.testing.assert_allclose(state.gradient, expected)
    assert [s.position for s in states] == [3, 2, 1, 0]


def test_fold_chain_lambda_zero_returns_synthetic(rng):
    maps, jvps = linear_chain(rng)
    synthetic = [rng.standard_normal((2, 4)) for _ in maps]
    states = fold_chain(rng.standard_normal((2, 4)), jvps, synthetic, LambdaSchedule.constant(0.0, 3))
    for state in states[1:]:
        np.testing.assert_array_equal(state.gradient, synthetic[state.position])


def test_fold_chain_calls_every_backward_once(rng):
    counts = [0, 0, 0]

    def counting(k):
        def jvp(g):
            counts[k] += 1
            return g

        return jvp

    schedule = LambdaSchedule(values=(0.0, 0.5, 1.0))
    fold_chain(np.ones((1, 2)), [counting(k) for k in range(3)], [np.zeros((1, 2))] * 3, schedule)
    assert counts == [1, 1, 1]


@pytest.mark.parametrize("seed", range(20))
def test_oracle_synthetic_gradients_give_true_gradient(seed):
    rng = make_rng(seed)
    maps, jvps = linear_chain(rng)
    top = rng.standard_normal((2, 4))
    exact = [top]
    for A in reversed(maps):
        exact.insert(0, exact[0] @ A)
    lams = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
    states = fold_chain(top, jvps, exact[:-1], LambdaSchedule(values=lams))
    for state in states:
        np.testing.assert_allclose(state.gradient, exact[state.position], atol=1e-12)


def test_geometric_weights_on_simplex_for_random_schedules():
    rng = make_rng(0)
    for _ in range(1000):
        K = int(rng.integers(1, 9))
        weights = geometric_weights(rng.uniform(0.0, 1.0, K))
        assert np.all(weights >= 0.0)
        assert abs(weights.sum() - 1.0) < 1e-12


def test_geometric_weights_endpoints():
    np.testing.assert_array_equal(geometric_weights([0.0, 0.0]), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(geometric_weights([1.0, 1.0]), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(geometric_weights([0.5, 0.5]), [0.5, 0.25, 0.25])


def test_fold_recurrent_full_backprop(rng):
    K = 4
    maps = [rng.standard_normal((3, 3)) * 0.5 for _ in range(K)]
    jvps = [lambda g, A=A: g @ A for A in maps]
    losses = [rng.standard_normal((2, 3)) for _ in range(K)]
    states = fold_recurrent(losses, jvps, [None] * K, LambdaSchedule(values=(1.0,) * (K + 1)))
    # plain BPTT: g_K = dl_K, g_k = dl_k + g_{k+1} A_k
    g = losses[-1]
    expected = {K: g}
    for k in range(K - 1, 0, -1):
        g = losses[k - 1] + g @ maps[k]
        expected[k] = g
    expected[0] = g @ maps[0]
    for state in states:
        np.testing.assert_allclose(state.gradient, expected[state.position])
    assert states[-1].position == 0
