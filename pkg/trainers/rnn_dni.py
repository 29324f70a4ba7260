"""
rnn_dni.py - truncated BPTT for an LSTM with a synthetic gradient bridging
each truncation boundary.

One training window:

    1. unroll T fresh steps from the carried (h, c), collecting per-step losses
    2. read delta_hat = M(h_end) and inject sg_scale * delta_hat as the
       gradient arriving at (h_end, c_end) from the future
    3. backpropagate through the T steps
    4. the gradient that reaches the window start is the (bootstrapped)
       regression target for the prediction made at the end of the previous
       window
    5. Adam-update core, readout, SG model and, if enabled, the aux head

The last step of each window stays cached (T + 1 cores) so the auxiliary
future-gradient loss, and optionally the SG regression error, can reach the
core through the step that produced the previous window's final state.

The SG model predicts [dh; dc] (2U outputs) from h alone.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Protocol

# Import external packages
import numpy as np

# Import functions from local modules
from networks.bp_lambda import LambdaSchedule, fold_recurrent
from networks.layers import (
    LinearLayer,
    LstmCache,
    LstmCore,
    add_grads,
    l2_loss,
    linear_backward,
    linear_forward,
    lstm_step_backward,
    lstm_step_forward,
    sigmoid,
    sigmoid_bce,
    softmax,
    softmax_xent,
)
from networks.synthetic_models import SgModel, sg_predict, sg_regression
from tasks.tasks_chars import CharLanes
from tasks.tasks_sequence import (
    BITS_THRESHOLD,
    DEFAULT_WIDTH,
    TASK_COPY,
    TASK_REPEAT_COPY,
    CurriculumState,
    EpisodeLanes,
    curriculum_advance,
)
from utils.utils_config import raise_config_error
from utils.utils_logger import logger
from utils.utils_numerics import DTYPE, check_finite, detach, prefixed, unprefixed

#####################################
# Default Configurations
#####################################

OUTPUT_BERNOULLI = "bernoulli"
OUTPUT_CATEGORICAL = "categorical"
TASK_CHARS = "chars"

LSTM_CACHE_FIELDS = ("x", "h_prev", "c_prev", "i", "f", "g", "o", "tanh_c", "Wx", "Wh")

#####################################
# Configuration Types
#####################################


@dataclass
class TbpttConfig:
    """Truncated BPTT settings; small defaults (U=64, batch 32) that run on a laptop."""

    task: str = TASK_COPY
    T: int = 3
    units: int = 64
    batch: int = 32
    lr: float = 7e-5
    dni_enabled: bool = True
    aux_enabled: bool = False
    sg_scale: float = 0.1
    backprop_sg_error_into_core: bool = False
    sg_hidden_layers: int = 1
    width: int = DEFAULT_WIDTH
    rolling_window: int = 50
    threshold: float = BITS_THRESHOLD
    text_path: str = ""

    def validate(self) -> None:
        if self.task not in (TASK_COPY, TASK_REPEAT_COPY, TASK_CHARS):
            raise_config_error(f"Unknown recurrent task: {self.task}")
        if self.T < 1:
            raise_config_error(f"unroll length T must be >= 1, got {self.T}")
        if self.aux_enabled and self.T < 2:
            raise_config_error("the auxiliary future-gradient task needs T >= 2")
        if self.aux_enabled and not self.dni_enabled:
            raise_config_error("the auxiliary future-gradient task needs DNI enabled")
        if self.units < 1 or self.batch < 1:
            raise_config_error(f"units and batch must be positive, got {self.units}, {self.batch}")
        if self.rolling_window < 1:
            raise_config_error(f"rolling_window must be >= 1, got {self.rolling_window}")


#####################################
# Model and Window State
#####################################


@dataclass
class AuxHead:
    """Linear head on h predicting the SG output T steps later."""

    linear: LinearLayer

    @classmethod
    def create(cls, rng: np.random.Generator, units: int, lr: float) -> "AuxHead":
        linear = LinearLayer.create(rng, units, 2 * units, zero=True)
        linear.init_optimizer(lr)
        return cls(linear=linear)

    def predict(self, h: np.ndarray):
        return linear_forward(self.linear, h)


@dataclass
class RecurrentModel:
    core: LstmCore
    readout: LinearLayer
    output_kind: str
    sg: SgModel | None = None
    aux: AuxHead | None = None

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        config: TbpttConfig,
        in_dim: int,
        out_dim: int,
        output_kind: str,
    ) -> "RecurrentModel":
        core = LstmCore.create(rng, in_dim, config.units)
        core.init_optimizer(config.lr)
        readout = LinearLayer.create(rng, config.units, out_dim)
        readout.init_optimizer(config.lr)
        sg = aux = None
        if config.dni_enabled:
            sg = SgModel.for_lstm(rng, config.units, hidden_layers=config.sg_hidden_layers, lr=config.lr)
        if config.aux_enabled:
            aux = AuxHead.create(rng, config.units, config.lr)
        return cls(core=core, readout=readout, output_kind=output_kind, sg=sg, aux=aux)

    @property
    def units(self) -> int:
        return self.core.units

    def set_learning_rate(self, lr: float) -> None:
        self.core.set_learning_rate(lr)
        self.readout.set_learning_rate(lr)
        if self.sg is not None:
            self.sg.set_learning_rate(lr)
        if self.aux is not None:
            self.aux.linear.set_learning_rate(lr)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = prefixed("core", self.core.state_dict())
        out.update(prefixed("readout", self.readout.state_dict()))
        if self.sg is not None:
            out.update(prefixed("sg", self.sg.state_dict()))
        if self.aux is not None:
            out.update(prefixed("aux", self.aux.linear.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.core.load_state_dict(unprefixed("core", state))
        self.readout.load_state_dict(unprefixed("readout", state))
        if self.sg is not None:
            self.sg.load_state_dict(unprefixed("sg", state))
        if self.aux is not None:
            self.aux.linear.load_state_dict(unprefixed("aux", state))


@dataclass
class RnnTrainWindow:
    """Carried state between windows: (h, c), the pending SG input and the retained core."""

    h: np.ndarray
    c: np.ndarray
    pending_h: np.ndarray | None = None
    retained: LstmCache | None = None
    index: int = 0

    @classmethod
    def fresh(cls, core: LstmCore, batch: int) -> "RnnTrainWindow":
        h, c = core.zero_state(batch)
        return cls(h=h, c=c)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"h": self.h.copy(), "c": self.c.copy(), "index": np.array([self.index], dtype=np.int64)}
        if self.pending_h is not None:
            out["pending_h"] = np.array(self.pending_h)
        if self.retained is not None:
            for name in LSTM_CACHE_FIELDS:
                out[f"retained.{name}"] = np.array(getattr(self.retained, name))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.h = np.array(state["h"], dtype=DTYPE)
        self.c = np.array(state["c"], dtype=DTYPE)
        self.index = int(state["index"][0])
        self.pending_h = detach(state["pending_h"]) if "pending_h" in state else None
        self.retained = None
        if "retained.x" in state:
            self.retained = LstmCache(
                **{name: np.array(state[f"retained.{name}"], dtype=DTYPE) for name in LSTM_CACHE_FIELDS}
            )


@dataclass
class WindowReport:
    task_loss: float
    probabilities: np.ndarray
    core: dict[str, np.ndarray]
    readout: dict[str, np.ndarray]
    sg: dict[str, dict] = field(default_factory=dict)
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    sg_loss: float | None = None
    aux_loss: float | None = None
    start_gradient: np.ndarray | None = None
    h_end: np.ndarray | None = None
    c_end: np.ndarray | None = None
    last_cache: LstmCache | None = None

    def metrics(self) -> dict[str, float]:
        out = {"task_loss": self.task_loss}
        if self.sg_loss is not None:
            out["sg_loss"] = self.sg_loss
        if self.aux_loss is not None:
            out["aux_loss"] = self.aux_loss
        return out


#####################################
# Per-step Losses
#####################################


def _step_loss(kind: str, logits: np.ndarray, target: np.ndarray, mask: np.ndarray | None):
    if kind == OUTPUT_BERNOULLI:
        return sigmoid_bce(logits, target, mask)
    return softmax_xent(logits, target)


def _probabilities(kind: str, logits: np.ndarray) -> np.ndarray:
    return sigmoid(logits) if kind == OUTPUT_BERNOULLI else softmax(logits)


def aux_future_loss(
    aux: AuxHead, h_start: np.ndarray, delta_future: np.ndarray | None
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """
    L2 between the aux prediction made from h at the window start and the
    SG output at the window end (detached, weight 1).

    Returns (loss, head grads, dL/dh_start).
    """
    pred, cache = aux.predict(h_start)
    target = np.zeros_like(pred) if delta_future is None else detach(delta_future)
    loss, dpred = l2_loss(pred, target)
    dh, dW, db = linear_backward(cache, dpred)
    return loss, {"W": dW, "b": db}, dh


#####################################
# Window Training
#####################################


def window_gradients(
    model: RecurrentModel,
    window: RnnTrainWindow,
    xs: np.ndarray,
    ys: np.ndarray,
    masks: np.ndarray | None,
    config: TbpttConfig,
) -> WindowReport:
    """Every gradient of one window; nothing is applied and the window is untouched."""
    if config.dni_enabled and window.index > 0 and window.pending_h is None:
        raise_config_error("non-first window has no pending synthetic gradient prediction")
    units = model.units
    h, c = window.h, window.c
    caches, read_caches, dlogits, probs = [], [], [], []
    task_loss = 0.0
    for t in range(xs.shape[0]):
        h, c, cache = lstm_step_forward(model.core, xs[t], h, c)
        logits, read_cache = linear_forward(model.readout, h)
        loss, dl = _step_loss(model.output_kind, logits, ys[t], None if masks is None else masks[t])
        task_loss += loss
        caches.append(cache)
        read_caches.append(read_cache)
        dlogits.append(dl)
        probs.append(_probabilities(model.output_kind, logits))
    check_finite("window loss", np.array(task_loss))

    delta_end = None
    if config.dni_enabled:
        delta_end = sg_predict(model.sg, h)
        dh_next = config.sg_scale * delta_end[:, :units]
        dc_next = config.sg_scale * delta_end[:, units:]
    else:
        dh_next = np.zeros_like(h)
        dc_next = np.zeros_like(c)

    core_grads: dict[str, np.ndarray] = {}
    readout_grads: dict[str, np.ndarray] = {}
    for t in reversed(range(xs.shape[0])):
        dh_read, dW, db = linear_backward(read_caches[t], dlogits[t])
        add_grads(readout_grads, {"W": dW, "b": db})
        step = lstm_step_backward(caches[t], dh_read + dh_next, dc_next)
        add_grads(core_grads, step.params)
        dh_next, dc_next = step.dh_prev, step.dc_prev
    start_gradient = np.concatenate([dh_next, dc_next], axis=1)

    report = WindowReport(
        task_loss=task_loss,
        probabilities=np.stack(probs),
        core=core_grads,
        readout=readout_grads,
        start_gradient=start_gradient,
        h_end=h,
        c_end=c,
        last_cache=caches[-1],
    )
    if window.pending_h is None:
        return report

    d_pending = None
    if config.dni_enabled:
        report.sg_loss, report.sg, d_sg = sg_regression(model.sg, window.pending_h, None, start_gradient)
        if config.backprop_sg_error_into_core:
            d_pending = d_sg
    if config.aux_enabled:
        report.aux_loss, report.aux, d_aux = aux_future_loss(model.aux, window.pending_h, delta_end)
        d_pending = d_aux if d_pending is None else d_pending + d_aux
    if d_pending is not None and window.retained is not None:
        extra = lstm_step_backward(window.retained, d_pending, np.zeros_like(d_pending))
        add_grads(core_grads, extra.params)
    return report


def window_step(
    model: RecurrentModel,
    window: RnnTrainWindow,
    xs: np.ndarray,
    ys: np.ndarray,
    masks: np.ndarray | None,
    config: TbpttConfig,
) -> WindowReport:
    """window_gradients, then Adam updates and the carried state advanced in place."""
    report = window_gradients(model, window, xs, ys, masks, config)
    model.core.apply_gradients(report.core)
    model.readout.apply_gradients(report.readout)
    if report.sg:
        model.sg.apply_gradients(report.sg)
    if report.aux:
        model.aux.linear.apply_gradients(report.aux)
    window.h, window.c = report.h_end, report.c_end
    window.pending_h = detach(report.h_end) if config.dni_enabled else None
    window.retained = report.last_cache
    window.index += 1
    return report


#####################################
# Recurrent BP(lambda) Cross-check
#####################################


def recurrent_bp_lambda_gradients(
    model: RecurrentModel,
    xs: np.ndarray,
    ys: np.ndarray,
    masks: np.ndarray | None,
    T: int,
    sg_scale: float,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
) -> dict[str, dict[str, np.ndarray]]:
    """
    Core and readout gradients of a whole sequence under the recurrent
    mixing recursion with lambda_k = 0 iff k mod T == 0. The state at
    position k is [h_k; c_k].
    """
    units = model.units
    batch = xs.shape[1]
    if h0 is None or c0 is None:
        h0, c0 = model.core.zero_state(batch)
    h, c = h0, c0
    caches, step_losses, synthetic = [], [], []
    readout_grads: dict[str, np.ndarray] = {}
    zeros = np.zeros((batch, units), dtype=DTYPE)
    for k in range(1, xs.shape[0] + 1):
        h, c, cache = lstm_step_forward(model.core, xs[k - 1], h, c)
        caches.append(cache)
        logits, read_cache = linear_forward(model.readout, h)
        _, dl = _step_loss(model.output_kind, logits, ys[k - 1], None if masks is None else masks[k - 1])
        dh_read, dW, db = linear_backward(read_cache, dl)
        add_grads(readout_grads, {"W": dW, "b": db})
        step_losses.append(np.concatenate([dh_read, zeros], axis=1))
        if k % T == 0:
            g = sg_predict(model.sg, h) if model.sg is not None else np.zeros((batch, 2 * units))
            synthetic.append(sg_scale * g)
        else:
            synthetic.append(None)

    core_grads: dict[str, np.ndarray] = {}

    def jvp_for(cache: LstmCache) -> Callable[[np.ndarray], np.ndarray]:
        def jvp(g: np.ndarray) -> np.ndarray:
            step = lstm_step_backward(cache, g[:, :units], g[:, units:])
            add_grads(core_grads, step.params)
            return np.concatenate([step.dh_prev, step.dc_prev], axis=1)

        return jvp

    fold_recurrent(step_losses, [jvp_for(cache) for cache in caches], synthetic, LambdaSchedule.truncation(T))
    return {"core": core_grads, "readout": readout_grads}


#####################################
# Learners and Curriculum
#####################################


class SequenceLearner(Protocol):
    def process_window(
        self, xs: np.ndarray, ys: np.ndarray, masks: np.ndarray | None
    ) -> tuple[np.ndarray, WindowReport | None]: ...


class RnnDniTrainer:
    """Sequence learner backed by an LSTM trained with window_step."""

    def __init__(
        self,
        config: TbpttConfig,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        output_kind: str = OUTPUT_BERNOULLI,
    ):
        config.validate()
        self.config = config
        self.model = RecurrentModel.create(rng, config, in_dim, out_dim, output_kind)
        self.window = RnnTrainWindow.fresh(self.model.core, config.batch)

    def process_window(self, xs, ys, masks):
        report = window_step(self.model, self.window, xs, ys, masks, self.config)
        return report.probabilities, report

    def state_dict(self) -> dict[str, np.ndarray]:
        out = prefixed("model", self.model.state_dict())
        out.update(prefixed("window", self.window.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.model.load_state_dict(unprefixed("model", state))
        self.window.load_state_dict(unprefixed("window", state))


@dataclass
class WindowOutcome:
    report: WindowReport | None
    finished_bits: list[float]
    advanced: bool


@dataclass
class CurriculumRunner:
    """Feeds lanes to a learner and advances the task on a rolling bits average."""

    learner: SequenceLearner
    lanes: EpisodeLanes
    config: TbpttConfig
    state: CurriculumState | None = None
    recent: deque = field(default_factory=deque)
    trace: list[tuple[int, int]] = field(default_factory=lambda: [(0, 0)])

    def __post_init__(self) -> None:
        if self.state is None:
            self.state = CurriculumState(kind=self.lanes.kind, threshold=self.config.threshold)
        self.recent = deque(self.recent, maxlen=self.config.rolling_window)

    def advance_window(self) -> WindowOutcome:
        xs, ys, masks = self.lanes.next_window(self.config.T)
        probs, report = self.learner.process_window(xs, ys, masks)
        bits = []
        for episode, episode_bits in self.lanes.record(probs):
            bits.append(episode_bits)
            if (episode.n, episode.r) == (self.state.n, self.state.r):
                self.recent.append(episode_bits)
        advanced = False
        if len(self.recent) == self.recent.maxlen:
            new_state = curriculum_advance(self.state, float(np.mean(self.recent)))
            if new_state is not self.state:
                self.state = new_state
                self.lanes.set_level(new_state.n, new_state.r)
                self.recent.clear()
                self.trace.append((self.lanes.completed, new_state.max_solved))
                advanced = True
        return WindowOutcome(report=report, finished_bits=bits, advanced=advanced)

    @property
    def recent_bits(self) -> float:
        return float(np.mean(self.recent)) if self.recent else float("nan")


def run_curriculum(
    learner: SequenceLearner,
    lanes: EpisodeLanes,
    config: TbpttConfig,
    budget: int,
) -> list[tuple[int, int]]:
    """
    Train until `budget` episodes have completed.

    Returns the progression trace: (episodes consumed, max T_task solved)
    at the start and at every advancement.
    """
    runner = CurriculumRunner(learner=learner, lanes=lanes, config=config)
    while lanes.completed < budget:
        runner.advance_window()
    logger.info(
        f"Curriculum finished after {lanes.completed} episodes; max T_task solved {runner.state.max_solved}"
    )
    return runner.trace


#####################################
# Character Modelling
#####################################


def bits_per_char(report: WindowReport, steps: int) -> float:
    """Mean per-step cross-entropy of the window, in bits."""
    return report.task_loss / steps / math.log(2.0)


@dataclass
class CharLmRunner:
    trainer: RnnDniTrainer
    lanes: CharLanes

    def advance_window(self) -> tuple[WindowReport, float]:
        steps = self.trainer.config.T
        xs, ys = self.lanes.next_window(steps)
        _, report = self.trainer.process_window(xs, ys, None)
        return report, bits_per_char(report, steps)
