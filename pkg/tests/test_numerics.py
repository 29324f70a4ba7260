import numpy as np
import pytest

from networks.layers import LinearLayer
from utils.utils_config import ConfigError
from utils.utils_numerics import (
    AdamState,
    DimensionError,
    adam_step,
    check_finite,
    detach,
    finite_diff_grad,
    make_rng,
    matmul,
    relative_error,
    rng_state_from_json,
    rng_state_to_json,
)


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(DimensionError):
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_rejects_vectors():
    with pytest.raises(DimensionError):
        matmul(np.zeros(3), np.zeros((3, 2)))


def test_check_finite_names_tensor():
    with pytest.raises(FloatingPointError, match="activations"):
        check_finite("activations", np.array([1.0, np.nan]))


def test_detach_is_read_only_copy():
    x = np.ones(3)
    y = detach(x)
    x[0] = 5.0
    assert y[0] == 1.0
    with pytest.raises(ValueError):
        y[0] = 2.0


def test_adam_first_step_is_lr_times_sign():
    grad = np.array([[0.5, -2.0], [3.0, -1e-3]])
    state = AdamState.for_param(np.zeros_like(grad), lr=0.01)
    new, state = adam_step(np.zeros_like(grad), grad, state)
    np.testing.assert_allclose(new, -0.01 * grad / (np.abs(grad) + state.eps), atol=1e-15)
    assert state.t == 1


def test_adam_bias_correction_over_two_steps():
    g1, g2 = np.array([1.0]), np.array([3.0])
    state = AdamState.for_param(np.zeros(1), lr=0.1)
    p, _ = adam_step(np.zeros(1), g1, state)
    p, _ = adam_step(p, g2, state)
    m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    expected = -0.1 * 1.0 / (1.0 + 1e-8) - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
    np.testing.assert_allclose(p, [expected], rtol=1e-12)


def test_adam_zero_gradient_leaves_params_unchanged():
    params = np.array([1.0, -2.0])
    new, _ = adam_step(params, np.zeros(2), AdamState.for_param(params, lr=0.1))
    np.testing.assert_array_equal(new, params)


def test_adam_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step(np.zeros(2), np.zeros(3), AdamState.for_param(np.zeros(2), lr=0.1))


def test_finite_diff_matches_quadratic():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    grad = finite_diff_grad(lambda v: float((v**2).sum()), x)
    np.testing.assert_allclose(grad, 2 * x, rtol=1e-8)


def test_relative_error_zero_for_equal_and_both_zero():
    a = np.array([1.0, 2.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_rng_state_json_roundtrip_continues_stream():
    rng = make_rng(42)
    rng.random(5)
    restored = rng_state_from_json(rng_state_to_json(rng))
    np.testing.assert_array_equal(rng.random(4), restored.random(4))


def test_make_rng_is_deterministic():
    np.testing.assert_array_equal(make_rng(7).random(3), make_rng(7).random(3))


def test_parametric_state_dict_restores_adam(rng):
    layer = LinearLayer.create(rng, 3, 2)
    layer.init_optimizer(0.01)
    layer.apply_gradients({"W": np.ones((2, 3)), "b": np.ones(2)})
    clone = LinearLayer.create(make_rng(1), 3, 2)
    clone.load_state_dict(layer.state_dict())
    step = {"W": np.full((2, 3), 0.5), "b": np.full(2, -0.5)}
    layer.apply_gradients(step)
    clone.apply_gradients(step)
    np.testing.assert_array_equal(layer.W, clone.W)
    np.testing.assert_array_equal(layer.b, clone.b)


def test_apply_gradients_requires_optimizer(rng):
    layer = LinearLayer.create(rng, 3, 2)
    before = layer.W.copy()
    with pytest.raises(ConfigError, match="init_optimizer"):
        layer.apply_gradients({"W": np.ones((2, 3))})
    np.testing.assert_array_equal(layer.W, before)
