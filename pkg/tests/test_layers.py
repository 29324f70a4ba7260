import numpy as np
import pytest

from networks.layers import (
    BatchNormLayer,
    LinearLayer,
    LstmCore,
    add_grads,
    batchnorm_backward,
    batchnorm_forward,
    l2_loss,
    linear_backward,
    linear_forward,
    lstm_step_backward,
    lstm_step_forward,
    relu_backward,
    relu_forward,
    sigmoid_bce,
    softmax_xent,
    standardize_backward,
    standardize_forward,
)
from utils.utils_numerics import DimensionError, finite_diff_grad, make_rng, relative_error

TOLERANCE = 1e-4
SEEDS = list(range(25))


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_gradients(seed):
    rng = make_rng(seed)
    layer = LinearLayer.create(rng, 4, 3)
    layer.b = rng.standard_normal(3)
    x = rng.standard_normal((5, 4))
    cotangent = rng.standard_normal((5, 3))

    def loss(x_, W_):
        return float((linear_forward(LinearLayer(W=W_, b=layer.b), x_)[0] * cotangent).sum())

    _, cache = linear_forward(layer, x)
    dx, dW, db = linear_backward(cache, cotangent)
    assert relative_error(dx, finite_diff_grad(lambda v: loss(v, layer.W), x)) < TOLERANCE
    assert relative_error(dW, finite_diff_grad(lambda v: loss(x, v), layer.W)) < TOLERANCE
    np.testing.assert_allclose(db, cotangent.sum(axis=0))


@pytest.mark.parametrize("seed", SEEDS)
def test_batchnorm_gradients_train_mode(seed):
    rng = make_rng(seed)
    norm = BatchNormLayer.create(3)
    norm.gamma = rng.uniform(0.5, 1.5, 3)
    x = rng.standard_normal((6, 3))
    cotangent = rng.standard_normal((6, 3))

    def loss(x_):
        return float((batchnorm_forward(norm, x_)[0] * cotangent).sum())

    _, cache = batchnorm_forward(norm, x)
    dx, dgamma, dbeta = batchnorm_backward(cache, cotangent)
    assert relative_error(dx, finite_diff_grad(loss, x)) < TOLERANCE
    np.testing.assert_allclose(dgamma, (cotangent * cache.x_hat).sum(axis=0))
    np.testing.assert_allclose(dbeta, cotangent.sum(axis=0))


def test_batchnorm_eval_mode_uses_running_stats(rng):
    norm = BatchNormLayer.create(2)
    for _ in range(50):
        batchnorm_forward(norm, 3.0 + rng.standard_normal((32, 2)))
    norm.training = False
    before = norm.running_mean.copy()
    y, _ = batchnorm_forward(norm, np.full((1, 2), 3.0))
    np.testing.assert_array_equal(norm.running_mean, before)
    assert np.all(np.abs(y) < 0.5)


def test_batchnorm_train_needs_two_rows():
    with pytest.raises(DimensionError):
        batchnorm_forward(BatchNormLayer.create(2), np.zeros((1, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_standardize_gradients(seed):
    rng = make_rng(seed)
    x = rng.standard_normal((5, 4))
    cotangent = rng.standard_normal((5, 4))
    _, cache = standardize_forward(x)
    dx = standardize_backward(cache, cotangent)
    numeric = finite_diff_grad(lambda v: float((standardize_forward(v)[0] * cotangent).sum()), x)
    assert relative_error(dx, numeric) < TOLERANCE


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_xent_gradients(seed):
    rng = make_rng(seed)
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)
    _, dlogits = softmax_xent(logits, labels)
    numeric = finite_diff_grad(lambda v: softmax_xent(v, labels)[0], logits)
    assert relative_error(dlogits, numeric) < TOLERANCE


def test_softmax_xent_uniform_logits():
    loss, _ = softmax_xent(np.zeros((3, 4)), np.array([0, 1, 2]))
    assert loss == pytest.approx(np.log(4.0))


@pytest.mark.parametrize("seed", SEEDS)
def test_sigmoid_bce_gradients_with_mask(seed):
    rng = make_rng(seed)
    logits = 3.0 * rng.standard_normal((4, 3))
    targets = (rng.random((4, 3)) < 0.5).astype(float)
    mask = (rng.random(4) < 0.7).astype(float)
    _, dlogits = sigmoid_bce(logits, targets, mask)
    numeric = finite_diff_grad(lambda v: sigmoid_bce(v, targets, mask)[0], logits)
    assert relative_error(dlogits, numeric) < TOLERANCE
    assert np.all(dlogits[mask == 0.0] == 0.0)


def test_sigmoid_bce_extreme_logits_stay_finite():
    loss, d = sigmoid_bce(np.array([[800.0, -800.0]]), np.array([[0.0, 1.0]]))
    assert np.isfinite(loss) and np.all(np.isfinite(d))
    assert loss == pytest.approx(1600.0)


def test_relu_gradient_masks_negatives():
    y, mask = relu_forward(np.array([[-1.0, 2.0]]))
    np.testing.assert_array_equal(y, [[0.0, 2.0]])
    np.testing.assert_array_equal(relu_backward(mask, np.ones((1, 2))), [[0.0, 1.0]])


def test_l2_loss_gradient():
    pred, target = np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros((2, 2))
    loss, d = l2_loss(pred, target)
    assert loss == pytest.approx(3.0)
    np.testing.assert_allclose(d, pred)


def test_lstm_forget_bias_and_gate_order(rng):
    core = LstmCore.create(rng, 2, 3)
    np.testing.assert_array_equal(core.b[3:6], np.ones(3))
    np.testing.assert_array_equal(core.b[:3], np.zeros(3))


@pytest.mark.parametrize("seed", range(10))
def test_lstm_five_step_unroll_gradients(seed):
    rng = make_rng(seed)
    steps, batch, n_in, units = 5, 2, 3, 4
    core = LstmCore.create(rng, n_in, units)
    xs = rng.standard_normal((steps, batch, n_in))
    cotangents = rng.standard_normal((steps, batch, units))
    h0, c0 = core.zero_state(batch)

    def unroll(Wx, Wh, b, x0):
        net = LstmCore(Wx=Wx, Wh=Wh, b=b)
        h, c, total = h0, c0, 0.0
        for t in range(steps):
            h, c, _ = lstm_step_forward(net, x0 if t == 0 else xs[t], h, c)
            total += float((h * cotangents[t]).sum())
        return total

    h, c, caches = h0, c0, []
    for t in range(steps):
        h, c, cache = lstm_step_forward(core, xs[t], h, c)
        caches.append(cache)
    dh, dc = np.zeros_like(h), np.zeros_like(c)
    grads, dx0 = {}, None
    for t in reversed(range(steps)):
        step = lstm_step_backward(caches[t], dh + cotangents[t], dc)
        add_grads(grads, step.params)
        dh, dc = step.dh_prev, step.dc_prev
        dx0 = step.dx

    assert relative_error(grads["Wx"], finite_diff_grad(lambda v: unroll(v, core.Wh, core.b, xs[0]), core.Wx)) < TOLERANCE
    assert relative_error(grads["Wh"], finite_diff_grad(lambda v: unroll(core.Wx, v, core.b, xs[0]), core.Wh)) < TOLERANCE
    assert relative_error(grads["b"], finite_diff_grad(lambda v: unroll(core.Wx, core.Wh, v, xs[0]), core.b)) < TOLERANCE
    assert relative_error(dx0, finite_diff_grad(lambda v: unroll(core.Wx, core.Wh, core.b, v), xs[0])) < TOLERANCE


def test_lstm_rejects_bad_state_shape(rng):
    core = LstmCore.create(rng, 2, 3)
    with pytest.raises(DimensionError):
        lstm_step_forward(core, np.zeros((2, 2)), np.zeros((2, 4)), np.zeros((2, 3)))


def test_linear_rejects_wrong_width(rng):
    with pytest.raises(DimensionError):
        linear_forward(LinearLayer.create(rng, 3, 2), np.zeros((1, 4)))
