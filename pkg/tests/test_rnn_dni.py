import math

import numpy as np
import pytest

from networks.layers import add_grads
from tasks.tasks_chars import CharLanes
from tasks.tasks_sequence import TASK_COPY, EpisodeLanes
from trainers.rnn_dni import (
    OUTPUT_BERNOULLI,
    OUTPUT_CATEGORICAL,
    TASK_CHARS,
    CharLmRunner,
    AuxHead,
    CurriculumRunner,
    RecurrentModel,
    RnnDniTrainer,
    RnnTrainWindow,
    TbpttConfig,
    aux_future_loss,
    recurrent_bp_lambda_gradients,
    run_curriculum,
    window_gradients,
    window_step,
)
from utils.utils_config import ConfigError
from utils.utils_numerics import finite_diff_grad, make_rng, relative_error

IN_DIM, OUT_DIM, UNITS, BATCH = 4, 3, 5, 2


def make_model(seed=0, **overrides):
    values = dict(T=3, units=UNITS, batch=BATCH, lr=1e-3)
    values.update(overrides)
    config = TbpttConfig(**values)
    config.validate()
    return RecurrentModel.create(make_rng(seed), config, IN_DIM, OUT_DIM, OUTPUT_BERNOULLI), config


def sequence(steps, seed=1):
    rng = make_rng(seed)
    xs = rng.standard_normal((steps, BATCH, IN_DIM))
    ys = (rng.random((steps, BATCH, OUT_DIM)) < 0.5).astype(float)
    masks = (rng.random((steps, BATCH)) < 0.8).astype(float)
    return xs, ys, masks


#####################################
# Window Gradients
#####################################


def test_three_windows_match_recurrent_mixing_with_truncation_schedule():
    model, config = make_model(lr=0.0)
    rng = make_rng(7)
    model.sg.head.W = 0.1 * rng.standard_normal(model.sg.head.W.shape)
    model.sg.head.b = 0.1 * rng.standard_normal(model.sg.head.b.shape)
    xs, ys, masks = sequence(9)

    window = RnnTrainWindow.fresh(model.core, BATCH)
    core, readout = {}, {}
    for w in range(3):
        span = slice(3 * w, 3 * w + 3)
        report = window_step(model, window, xs[span], ys[span], masks[span], config)
        add_grads(core, report.core)
        add_grads(readout, report.readout)

    reference = recurrent_bp_lambda_gradients(model, xs, ys, masks, T=3, sg_scale=0.1)
    for name, grad in reference["core"].items():
        assert np.max(np.abs(grad - core[name])) < 1e-10
    for name, grad in reference["readout"].items():
        assert np.max(np.abs(grad - readout[name])) < 1e-10


@pytest.mark.parametrize("steps", [1, 3])
def test_window_without_dni_matches_finite_differences(steps):
    model, config = make_model(dni_enabled=False, T=steps)
    xs, ys, masks = sequence(steps)
    window = RnnTrainWindow.fresh(model.core, BATCH)
    report = window_gradients(model, window, xs, ys, masks, config)

    def loss_with(name):
        def loss(value):
            saved = getattr(model.core, name)
            setattr(model.core, name, value)
            try:
                return window_gradients(model, window, xs, ys, masks, config).task_loss
            finally:
                setattr(model.core, name, saved)

        return loss

    for name in ("Wx", "Wh", "b"):
        numeric = finite_diff_grad(loss_with(name), getattr(model.core, name))
        assert relative_error(report.core[name], numeric) < 1e-5


def test_fresh_sg_window_equals_plain_truncated_bptt():
    with_sg, config = make_model(seed=3)
    plain, plain_config = make_model(seed=3, dni_enabled=False)
    xs, ys, masks = sequence(3)
    a = window_gradients(with_sg, RnnTrainWindow.fresh(with_sg.core, BATCH), xs, ys, masks, config)
    b = window_gradients(plain, RnnTrainWindow.fresh(plain.core, BATCH), xs, ys, masks, plain_config)
    for name, grad in b.core.items():
        np.testing.assert_array_equal(a.core[name], grad)


def test_window_gradients_leave_window_untouched():
    model, config = make_model()
    window = RnnTrainWindow.fresh(model.core, BATCH)
    window_gradients(model, window, *sequence(3), config)
    assert window.index == 0 and window.pending_h is None
    assert np.all(window.h == 0.0)


def test_window_step_advances_carried_state():
    model, config = make_model()
    window = RnnTrainWindow.fresh(model.core, BATCH)
    first = window_step(model, window, *sequence(3), config)
    assert first.sg_loss is None
    assert window.index == 1
    np.testing.assert_array_equal(window.h, first.h_end)
    assert window.pending_h is not None and window.retained is not None
    second = window_step(model, window, *sequence(3, seed=2), config)
    assert second.sg_loss is not None and second.aux_loss is None


def test_aux_loss_reported_from_second_window():
    model, config = make_model(aux_enabled=True)
    window = RnnTrainWindow.fresh(model.core, BATCH)
    assert window_step(model, window, *sequence(3), config).aux_loss is None
    report = window_step(model, window, *sequence(3, seed=2), config)
    assert report.aux_loss is not None
    assert set(report.metrics()) == {"task_loss", "sg_loss", "aux_loss"}


def test_aux_future_loss_regresses_onto_detached_target():
    aux = AuxHead.create(make_rng(0), UNITS, 1e-3)
    rng = make_rng(2)
    aux.linear.W = 0.1 * rng.standard_normal(aux.linear.W.shape)
    h = rng.standard_normal((BATCH, UNITS))
    target = rng.standard_normal((BATCH, 2 * UNITS))
    loss, grads, dh = aux_future_loss(aux, h, target)
    pred = h @ aux.linear.W.T + aux.linear.b
    assert loss == pytest.approx(float(((pred - target) ** 2).sum() / BATCH))
    numeric = finite_diff_grad(lambda v: aux_future_loss(aux, v, target)[0], h)
    assert relative_error(dh, numeric) < 1e-6
    assert set(grads) == {"W", "b"}


def test_aux_future_loss_without_target_pulls_towards_zero():
    aux = AuxHead.create(make_rng(0), UNITS, 1e-3)
    loss, _, dh = aux_future_loss(aux, make_rng(1).standard_normal((BATCH, UNITS)), None)
    assert loss == 0.0
    assert np.all(dh == 0.0)


def test_sg_error_into_core_changes_core_gradient():
    model, config = make_model(backprop_sg_error_into_core=True)
    window = RnnTrainWindow.fresh(model.core, BATCH)
    window_step(model, window, *sequence(3), config)
    model.sg.head.W = 0.1 * make_rng(4).standard_normal(model.sg.head.W.shape)
    coupled = window_gradients(model, window, *sequence(3, seed=2), config)
    config.backprop_sg_error_into_core = False
    plain = window_gradients(model, window, *sequence(3, seed=2), config)
    assert not np.allclose(coupled.core["Wh"], plain.core["Wh"])


def test_non_first_window_needs_pending_prediction():
    model, config = make_model()
    window = RnnTrainWindow.fresh(model.core, BATCH)
    window.index = 1
    with pytest.raises(ConfigError):
        window_gradients(model, window, *sequence(3), config)


@pytest.mark.parametrize(
    "overrides",
    [dict(T=0), dict(aux_enabled=True, T=1), dict(aux_enabled=True, dni_enabled=False), dict(task="sorting")],
)
def test_invalid_tbptt_configs(overrides):
    with pytest.raises(ConfigError):
        TbpttConfig(**overrides).validate()


def test_trainer_state_roundtrip():
    config = TbpttConfig(T=3, units=UNITS, batch=BATCH, lr=1e-3, aux_enabled=True)
    trainer = RnnDniTrainer(config, IN_DIM, OUT_DIM, make_rng(0))
    for seed in (1, 2):
        trainer.process_window(*sequence(3, seed=seed))
    clone = RnnDniTrainer(config, IN_DIM, OUT_DIM, make_rng(9))
    clone.load_state_dict(trainer.state_dict())
    _, a = trainer.process_window(*sequence(3, seed=3))
    _, b = clone.process_window(*sequence(3, seed=3))
    assert a.task_loss == b.task_loss and a.sg_loss == b.sg_loss and a.aux_loss == b.aux_loss


#####################################
# Curriculum
#####################################


class OracleLearner:
    def process_window(self, xs, ys, masks):
        return ys, None


class CoinLearner:
    def process_window(self, xs, ys, masks):
        return np.full_like(ys, 0.5), None


def copy_lanes(seed=0):
    return EpisodeLanes(TASK_COPY, batch=4, rng=make_rng(seed), width=3)


def test_perfect_learner_advances_curriculum():
    config = TbpttConfig(T=3, batch=4, rolling_window=5)
    runner = CurriculumRunner(learner=OracleLearner(), lanes=copy_lanes(), config=config)
    outcomes = [runner.advance_window() for _ in range(40)]
    assert any(outcome.advanced for outcome in outcomes)
    assert runner.state.n > 1
    assert runner.trace[0] == (0, 0) and runner.trace[1][1] == 4


def test_chance_learner_never_advances():
    config = TbpttConfig(T=3, batch=4, rolling_window=5)
    runner = CurriculumRunner(learner=CoinLearner(), lanes=copy_lanes(), config=config)
    for _ in range(40):
        outcome = runner.advance_window()
        assert not outcome.advanced
    assert runner.trace == [(0, 0)]
    # each level-1 episode has one output step of three bits
    assert runner.recent_bits == pytest.approx(3.0)


def test_run_curriculum_consumes_budget():
    lanes = copy_lanes()
    trace = run_curriculum(OracleLearner(), lanes, TbpttConfig(T=3, batch=4, rolling_window=5), budget=60)
    assert lanes.completed >= 60
    assert [solved for _, solved in trace] == sorted(solved for _, solved in trace)
    assert trace[-1][1] >= 5


#####################################
# Character Modelling
#####################################


def test_char_runner_reports_bits_per_char():
    lanes = CharLanes(b"the quick brown fox jumps over the lazy dog. " * 3, batch=2)
    config = TbpttConfig(task=TASK_CHARS, T=4, units=6, batch=2, lr=1e-3)
    trainer = RnnDniTrainer(config, lanes.vocab_size, lanes.vocab_size, make_rng(0), OUTPUT_CATEGORICAL)
    runner = CharLmRunner(trainer=trainer, lanes=lanes)
    report, bpc = runner.advance_window()
    assert bpc == pytest.approx(report.task_loss / 4 / math.log(2.0))
    assert 0.0 < bpc < 2.0 * math.log2(lanes.vocab_size)
    assert trainer.window.index == 1 and lanes.position == 4
