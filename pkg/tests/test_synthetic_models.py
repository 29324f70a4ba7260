import numpy as np
import pytest

from networks.synthetic_models import (
    SgModel,
    SyntheticInputModel,
    one_hot,
    sg_predict,
    sg_regression,
    sg_update,
    synth_input_predict,
    synth_input_update,
)
from utils.utils_config import ConfigError
from utils.utils_numerics import finite_diff_grad, make_rng, relative_error


@pytest.mark.parametrize("hidden_layers", [0, 1, 2])
@pytest.mark.parametrize("batchnorm", [True, False])
def test_fresh_sg_model_outputs_exact_zero(rng, hidden_layers, batchnorm):
    model = SgModel.create(rng, 6, 6, hidden_layers=hidden_layers, hidden_width=9, batchnorm=batchnorm)
    out = sg_predict(model, rng.standard_normal((5, 6)))
    assert np.all(out == 0.0)


def test_fresh_conditional_model_outputs_zero(rng):
    model = SgModel.create(rng, 4, 4, hidden_layers=1, hidden_width=8, num_classes=3)
    out = model.forward(rng.standard_normal((3, 4)), np.array([0, 2, 1]))
    assert np.all(out == 0.0)


def test_fresh_synthetic_input_model_outputs_zero(rng):
    model = SyntheticInputModel.create(rng, 7, 5, hidden_layers=1, hidden_width=6)
    assert np.all(synth_input_predict(model, rng.standard_normal((4, 7))) == 0.0)


def test_lstm_sg_shape(rng):
    model = SgModel.for_lstm(rng, units=5)
    assert model.forward(rng.standard_normal((2, 5))).shape == (2, 10)


def test_conditioning_mismatch_raises(rng):
    conditional = SgModel.create(rng, 3, 3, hidden_layers=0, num_classes=2)
    plain = SgModel.create(rng, 3, 3, hidden_layers=0)
    with pytest.raises(ConfigError):
        conditional.forward(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        plain.forward(np.zeros((2, 3)), np.array([0, 1]))


def test_one_hot_rejects_out_of_range():
    with pytest.raises(ConfigError):
        one_hot(np.array([0, 3]), 3)


def test_sg_update_reduces_loss_on_fixed_target(rng):
    model = SgModel.create(rng, 4, 4, hidden_layers=1, hidden_width=16, batchnorm=False, lr=1e-2)
    h = rng.standard_normal((16, 4))
    target = 0.1 * rng.standard_normal((16, 4))
    first = sg_update(model, h, None, target)
    for _ in range(100):
        last = sg_update(model, h, None, target)
    assert last < 0.5 * first


def test_conditional_sg_model_uses_labels_after_training(rng):
    model = SgModel.create(rng, 4, 4, hidden_layers=0, num_classes=3, batchnorm=False, lr=1e-2)
    h = rng.standard_normal((12, 4))
    labels = np.arange(12) % 3
    target = np.where(labels[:, None] == 0, 1.0, -1.0) * np.ones((12, 4))
    for _ in range(5):
        sg_update(model, h, labels, target)
    fixed_h = rng.standard_normal((2, 4))
    as_zero = sg_predict(model, fixed_h, np.array([0, 0]))
    as_one = sg_predict(model, fixed_h, np.array([1, 1]))
    assert not np.allclose(as_zero, as_one)
    assert np.all(as_zero > as_one)


def test_synth_input_update_moves_toward_activation(rng):
    model = SyntheticInputModel.create(rng, 3, 2, hidden_layers=1, hidden_width=8, batchnorm=False, lr=1e-2)
    x = rng.standard_normal((8, 3))
    target = np.ones((8, 2))
    first = synth_input_update(model, x, None, target)
    for _ in range(50):
        last = synth_input_update(model, x, None, target)
    assert last < first


def test_sg_regression_input_gradient_matches_finite_differences():
    rng = make_rng(3)
    model = SgModel.create(rng, 3, 3, hidden_layers=1, hidden_width=5, batchnorm=False)
    model.head.W = rng.standard_normal(model.head.W.shape)
    h = rng.standard_normal((4, 3))
    target = rng.standard_normal((4, 3))
    _, _, dh = sg_regression(model, h, None, target)
    numeric = finite_diff_grad(lambda v: sg_regression(model, v, None, target)[0], h)
    assert relative_error(dh, numeric) < 1e-6


def test_regression_target_is_not_mutated(rng):
    model = SgModel.create(rng, 2, 2, hidden_layers=0, lr=1e-2)
    target = np.ones((3, 2))
    sg_update(model, np.ones((3, 2)), None, target)
    np.testing.assert_array_equal(target, np.ones((3, 2)))
