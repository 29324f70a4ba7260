"""
multi_net.py - two recurrent networks on different clocks.

Network A ticks once per digit of an MNIST stream and classifies how many
odd digits it saw over the last T ticks. Every T ticks it sends a message
to Network B, which classifies how many 3s appeared over the last T^2
ticks.

Modes:
    locked                 unroll T^2 A-ticks jointly, one update for both
    decoupled_dni          A updates every T ticks using B's synthetic
                           gradient on the message (x sg_feedback_scale);
                           B updates every T^2 ticks and trains the SG model
    decoupled_no_feedback  as decoupled_dni but A receives nothing from B
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import math
from dataclasses import dataclass
from typing import Any

# Import external packages
import numpy as np

# Import functions from local modules
from networks.layers import (
    LinearLayer,
    LstmCore,
    add_grads,
    linear_backward,
    linear_forward,
    lstm_step_backward,
    lstm_step_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
    standardize_backward,
    standardize_forward,
)
from networks.synthetic_models import SgModel, sg_predict, sg_update
from tasks.tasks_mnist import IMAGE_SIZE, MnistDataset
from utils.utils_config import raise_config_error
from utils.utils_numerics import check_finite, prefixed, unprefixed

#####################################
# Default Configurations
#####################################

MODE_LOCKED = "locked"
MODE_DNI = "decoupled_dni"
MODE_NO_FEEDBACK = "decoupled_no_feedback"
MODES = (MODE_LOCKED, MODE_DNI, MODE_NO_FEEDBACK)

#####################################
# Configuration and Labels
#####################################


@dataclass
class TwoNetConfig:
    """Two-network settings; widths are small so a run fits on a laptop."""

    T: int = 4
    message_dim: int = 32
    units: int = 64
    hidden: int = 64
    sg_hidden_width: int = 64
    sg_feedback_scale: float = 10.0
    mode: str = MODE_DNI
    lr: float = 1e-4
    batch: int = 32

    def validate(self) -> None:
        if self.T < 2:
            raise_config_error(f"tick ratio T must be >= 2, got {self.T}")
        if self.mode not in MODES:
            raise_config_error(f"mode must be one of {MODES}, got {self.mode}")
        if self.batch < 2:
            raise_config_error("message standardization needs a batch of at least 2")

    @property
    def odd_classes(self) -> int:
        return self.T + 1

    @property
    def three_classes(self) -> int:
        return self.T * self.T + 1


@dataclass
class StreamLabels:
    count_odd: np.ndarray
    count_threes: np.ndarray


def _trailing_sum(flags: np.ndarray, window: int) -> np.ndarray:
    total = np.cumsum(flags, axis=0)
    shifted = np.zeros_like(total)
    shifted[window:] = total[:-window]
    return total - shifted


def stream_labels(digits: np.ndarray, T: int) -> StreamLabels:
    """
    Per-step odd counts over the last T digits and counts of 3s over the
    last T^2 digits. Negative entries mark positions before the stream
    started and count as nothing.
    """
    d = np.asarray(digits, dtype=np.int64)
    valid = d >= 0
    odd = (valid & (d % 2 == 1)).astype(np.int64)
    threes = (d == 3).astype(np.int64)
    return StreamLabels(count_odd=_trailing_sum(odd, T), count_threes=_trailing_sum(threes, T * T))


def chance_error(T: int, p_three: float = 0.1) -> float:
    """Error of always guessing the most likely count of 3s in T^2 digits."""
    n = T * T
    pmf = [math.comb(n, k) * p_three**k * (1.0 - p_three) ** (n - k) for k in range(n + 1)]
    return 1.0 - max(pmf)


def draw_stream(
    dataset: MnistDataset, rng: np.random.Generator, steps: int, batch: int
) -> tuple[np.ndarray, np.ndarray]:
    """Images [steps x batch x 784] and digits [steps x batch] drawn with replacement."""
    idx = rng.integers(0, len(dataset), size=(steps, batch))
    return dataset.images[idx], dataset.labels[idx]


#####################################
# Networks
#####################################


@dataclass
class NetworkA:
    fc1: LinearLayer
    fc2: LinearLayer
    core: LstmCore
    odd_head: LinearLayer
    message_head: LinearLayer

    def parts(self) -> dict[str, Any]:
        return {
            "fc1": self.fc1,
            "fc2": self.fc2,
            "core": self.core,
            "odd_head": self.odd_head,
            "message_head": self.message_head,
        }


@dataclass
class NetworkB:
    core: LstmCore
    threes_head: LinearLayer

    def parts(self) -> dict[str, Any]:
        return {"core": self.core, "threes_head": self.threes_head}


def _a_tick(a: NetworkA, x: np.ndarray, h: np.ndarray, c: np.ndarray, emit: bool):
    z1, c1 = linear_forward(a.fc1, x)
    s1, n1 = standardize_forward(z1)
    r1, m1 = relu_forward(s1)
    z2, c2 = linear_forward(a.fc2, r1)
    s2, n2 = standardize_forward(z2)
    r2, m2 = relu_forward(s2)
    h, c, core_cache = lstm_step_forward(a.core, r2, h, c)
    logits, head_cache = linear_forward(a.odd_head, h)
    message = msg_cache = None
    if emit:
        raw, msg_lin = linear_forward(a.message_head, h)
        message, msg_norm = standardize_forward(raw)
        msg_cache = (msg_lin, msg_norm)
    cache = (c1, n1, m1, c2, n2, m2, core_cache, head_cache, msg_cache)
    return logits, message, h, c, cache


def _a_tick_backward(
    cache: tuple,
    dlogits: np.ndarray,
    dmessage: np.ndarray | None,
    dh: np.ndarray,
    dc: np.ndarray,
    grads: dict[str, dict],
) -> tuple[np.ndarray, np.ndarray]:
    c1, n1, m1, c2, n2, m2, core_cache, head_cache, msg_cache = cache
    dh_head, dW, db = linear_backward(head_cache, dlogits)
    add_grads(grads.setdefault("odd_head", {}), {"W": dW, "b": db})
    dh = dh + dh_head
    if msg_cache is not None and dmessage is not None:
        msg_lin, msg_norm = msg_cache
        draw = standardize_backward(msg_norm, dmessage)
        dh_msg, dW, db = linear_backward(msg_lin, draw)
        add_grads(grads.setdefault("message_head", {}), {"W": dW, "b": db})
        dh = dh + dh_msg
    step = lstm_step_backward(core_cache, dh, dc)
    add_grads(grads.setdefault("core", {}), step.params)
    d = relu_backward(m2, step.dx)
    d = standardize_backward(n2, d)
    d, dW, db = linear_backward(c2, d)
    add_grads(grads.setdefault("fc2", {}), {"W": dW, "b": db})
    d = relu_backward(m1, d)
    d = standardize_backward(n1, d)
    _, dW, db = linear_backward(c1, d)
    add_grads(grads.setdefault("fc1", {}), {"W": dW, "b": db})
    return step.dh_prev, step.dc_prev


def _b_tick(b: NetworkB, message: np.ndarray, h: np.ndarray, c: np.ndarray):
    h, c, core_cache = lstm_step_forward(b.core, message, h, c)
    logits, head_cache = linear_forward(b.threes_head, h)
    return logits, h, c, (core_cache, head_cache)


def _b_tick_backward(cache: tuple, dlogits: np.ndarray, dh: np.ndarray, dc: np.ndarray, grads: dict):
    core_cache, head_cache = cache
    dh_head, dW, db = linear_backward(head_cache, dlogits)
    add_grads(grads.setdefault("threes_head", {}), {"W": dW, "b": db})
    step = lstm_step_backward(core_cache, dh + dh_head, dc)
    add_grads(grads.setdefault("core", {}), step.params)
    return step.dx, step.dh_prev, step.dc_prev


#####################################
# System
#####################################


@dataclass
class TwoNetReport:
    loss_a: float
    loss_b: float | None
    error_a: float
    error_b: float | None
    a_updates: int
    b_updates: int
    sg_loss: float | None = None

    def metrics(self) -> dict[str, float]:
        out = {
            "loss_a": self.loss_a,
            "error_a": self.error_a,
            "a_updates": float(self.a_updates),
            "b_updates": float(self.b_updates),
        }
        if self.loss_b is not None:
            out["loss_b"] = self.loss_b
            out["error_b"] = self.error_b
        if self.sg_loss is not None:
            out["sg_loss"] = self.sg_loss
        return out


@dataclass
class TwoNetSystem:
    config: TwoNetConfig
    a: NetworkA
    b: NetworkB
    sg: SgModel | None
    a_state: tuple[np.ndarray, np.ndarray]
    b_state: tuple[np.ndarray, np.ndarray]
    history: np.ndarray
    a_updates: int = 0
    b_updates: int = 0
    ticks: int = 0

    @classmethod
    def create(cls, config: TwoNetConfig, rng: np.random.Generator, input_dim: int = IMAGE_SIZE) -> "TwoNetSystem":
        config.validate()
        a = NetworkA(
            fc1=LinearLayer.create(rng, input_dim, config.hidden),
            fc2=LinearLayer.create(rng, config.hidden, config.hidden),
            core=LstmCore.create(rng, config.hidden, config.units),
            odd_head=LinearLayer.create(rng, config.units, config.odd_classes),
            message_head=LinearLayer.create(rng, config.units, config.message_dim),
        )
        b = NetworkB(
            core=LstmCore.create(rng, config.message_dim, config.units),
            threes_head=LinearLayer.create(rng, config.units, config.three_classes),
        )
        for part in list(a.parts().values()) + list(b.parts().values()):
            part.init_optimizer(config.lr)
        sg = None
        if config.mode == MODE_DNI:
            sg = SgModel.create(
                rng,
                input_dim=config.message_dim,
                output_dim=config.message_dim,
                hidden_layers=1,
                hidden_width=config.sg_hidden_width,
                batchnorm=False,
                lr=config.lr,
            )
        return cls(
            config=config,
            a=a,
            b=b,
            sg=sg,
            a_state=a.core.zero_state(config.batch),
            b_state=b.core.zero_state(config.batch),
            history=np.full((config.T * config.T - 1, config.batch), -1, dtype=np.int64),
        )

    def set_learning_rate(self, lr: float) -> None:
        for part in list(self.a.parts().values()) + list(self.b.parts().values()):
            part.set_learning_rate(lr)
        if self.sg is not None:
            self.sg.set_learning_rate(lr)

    def labels_for(self, digits: np.ndarray) -> StreamLabels:
        """Labels for the next chunk, using the carried digit history."""
        full = np.concatenate([self.history, digits], axis=0)
        labels = stream_labels(full, self.config.T)
        keep = digits.shape[0]
        return StreamLabels(count_odd=labels.count_odd[-keep:], count_threes=labels.count_threes[-keep:])

    def _advance_history(self, digits: np.ndarray) -> None:
        self.history = np.concatenate([self.history, digits], axis=0)[-(self.config.T**2 - 1) :]
        self.ticks += digits.shape[0]

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, part in self.a.parts().items():
            out.update(prefixed(f"a.{name}", part.state_dict()))
        for name, part in self.b.parts().items():
            out.update(prefixed(f"b.{name}", part.state_dict()))
        if self.sg is not None:
            out.update(prefixed("sg", self.sg.state_dict()))
        out["a_state.h"], out["a_state.c"] = self.a_state
        out["b_state.h"], out["b_state.c"] = self.b_state
        out["history"] = self.history.copy()
        out["counters"] = np.array([self.a_updates, self.b_updates, self.ticks], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, part in self.a.parts().items():
            part.load_state_dict(unprefixed(f"a.{name}", state))
        for name, part in self.b.parts().items():
            part.load_state_dict(unprefixed(f"b.{name}", state))
        if self.sg is not None:
            self.sg.load_state_dict(unprefixed("sg", state))
        self.a_state = (np.array(state["a_state.h"]), np.array(state["a_state.c"]))
        self.b_state = (np.array(state["b_state.h"]), np.array(state["b_state.c"]))
        self.history = np.array(state["history"], dtype=np.int64)
        self.a_updates, self.b_updates, self.ticks = (int(v) for v in state["counters"])


def _apply(parts: dict[str, Any], grads: dict[str, dict]) -> None:
    for name, part_grads in grads.items():
        parts[name].apply_gradients(part_grads)


def _error(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) != labels))


#####################################
# Joint (locked) Gradients
#####################################


@dataclass
class JointResult:
    loss_a: float
    loss_b: float
    error_a: float
    error_b: float
    grads_a: dict[str, dict]
    grads_b: dict[str, dict]
    message_grads: list[np.ndarray]
    backflow: list[np.ndarray]
    a_state: tuple[np.ndarray, np.ndarray]
    b_state: tuple[np.ndarray, np.ndarray]


def joint_loss_and_grads(
    a: NetworkA,
    b: NetworkB,
    images: np.ndarray,
    odd_labels: np.ndarray,
    three_labels: np.ndarray,
    a_state: tuple[np.ndarray, np.ndarray],
    b_state: tuple[np.ndarray, np.ndarray],
    T: int,
) -> JointResult:
    """
    Full BPTT through both networks and the message links over one chunk.

    The loss is the sum over A-ticks of A's mean cross-entropy plus the sum
    over B-ticks of B's. three_labels holds one row per B-tick. Nothing is
    mutated.
    """
    steps = images.shape[0]
    if steps % T:
        raise_config_error(f"chunk of {steps} ticks is not a multiple of T={T}")
    h, c = a_state
    a_caches, a_dlogits, messages = [], [], []
    loss_a = err_a = 0.0
    for s in range(steps):
        logits, message, h, c, cache = _a_tick(a, images[s], h, c, emit=(s % T == T - 1))
        loss, dl = softmax_xent(logits, odd_labels[s])
        loss_a += loss
        err_a += _error(logits, odd_labels[s])
        a_caches.append(cache)
        a_dlogits.append(dl)
        if message is not None:
            messages.append(message)
    new_a_state = (h, c)

    h, c = b_state
    b_caches, b_dlogits = [], []
    loss_b = err_b = 0.0
    for j, message in enumerate(messages):
        logits, h, c, cache = _b_tick(b, message, h, c)
        loss, dl = softmax_xent(logits, three_labels[j])
        loss_b += loss
        err_b += _error(logits, three_labels[j])
        b_caches.append(cache)
        b_dlogits.append(dl)
    new_b_state = (h, c)
    check_finite("joint loss", np.array(loss_a + loss_b))

    grads_b: dict[str, dict] = {}
    dh, dc = np.zeros_like(h), np.zeros_like(c)
    message_grads = [None] * len(messages)
    for j in reversed(range(len(messages))):
        message_grads[j], dh, dc = _b_tick_backward(b_caches[j], b_dlogits[j], dh, dc, grads_b)

    grads_a: dict[str, dict] = {}
    backflow = []
    dh, dc = np.zeros_like(a_state[0]), np.zeros_like(a_state[1])
    for s in reversed(range(steps)):
        dmessage = message_grads[s // T] if s % T == T - 1 else None
        if dmessage is not None:
            backflow.append(_message_backflow(a_caches[s], dmessage))
        dh, dc = _a_tick_backward(a_caches[s], a_dlogits[s], dmessage, dh, dc, grads_a)
    backflow.reverse()
    return JointResult(
        loss_a=loss_a,
        loss_b=loss_b,
        error_a=err_a / steps,
        error_b=err_b / max(1, len(messages)),
        grads_a=grads_a,
        grads_b=grads_b,
        message_grads=message_grads,
        backflow=backflow,
        a_state=new_a_state,
        b_state=new_b_state,
    )


def _message_backflow(cache: tuple, dmessage: np.ndarray) -> np.ndarray:
    """Gradient B's loss sends into A's hidden state through one message."""
    msg_lin, msg_norm = cache[-1]
    dh, _, _ = linear_backward(msg_lin, standardize_backward(msg_norm, dmessage))
    return dh


#####################################
# Training Steps
#####################################


def locked_joint_step(system: TwoNetSystem, images: np.ndarray, digits: np.ndarray) -> TwoNetReport:
    """Unroll T^2 A-ticks (T B-ticks) jointly and apply one update to each network."""
    T = system.config.T
    if images.shape[0] != T * T:
        raise_config_error(f"locked mode needs a chunk of T^2={T * T} ticks, got {images.shape[0]}")
    labels = system.labels_for(digits)
    three_labels = labels.count_threes[T - 1 :: T]
    result = joint_loss_and_grads(
        system.a, system.b, images, labels.count_odd, three_labels, system.a_state, system.b_state, T
    )
    _apply(system.a.parts(), result.grads_a)
    _apply(system.b.parts(), result.grads_b)
    system.a_state, system.b_state = result.a_state, result.b_state
    system.a_updates += 1
    system.b_updates += 1
    system._advance_history(digits)
    return TwoNetReport(
        loss_a=result.loss_a / (T * T),
        loss_b=result.loss_b / T,
        error_a=result.error_a,
        error_b=result.error_b,
        a_updates=system.a_updates,
        b_updates=system.b_updates,
    )


def _a_block(system: TwoNetSystem, images: np.ndarray, odd_labels: np.ndarray):
    """T A-ticks, truncated BPTT with the (scaled) synthetic message gradient at the end."""
    config = system.config
    a = system.a
    h, c = system.a_state
    caches, dlogits = [], []
    loss = err = 0.0
    message = None
    for s in range(config.T):
        logits, emitted, h, c, cache = _a_tick(a, images[s], h, c, emit=(s == config.T - 1))
        step_loss, dl = softmax_xent(logits, odd_labels[s])
        loss += step_loss
        err += _error(logits, odd_labels[s])
        caches.append(cache)
        dlogits.append(dl)
        if emitted is not None:
            message = emitted
    check_finite("network A loss", np.array(loss))
    if config.mode == MODE_DNI:
        feedback = config.sg_feedback_scale * sg_predict(system.sg, message)
    else:
        feedback = np.zeros_like(message)
    grads: dict[str, dict] = {}
    dh, dc = np.zeros_like(h), np.zeros_like(c)
    for s in reversed(range(config.T)):
        dmessage = feedback if s == config.T - 1 else None
        dh, dc = _a_tick_backward(caches[s], dlogits[s], dmessage, dh, dc, grads)
    _apply(a.parts(), grads)
    system.a_state = (h, c)
    system.a_updates += 1
    return message, loss / config.T, err / config.T


def decoupled_step(system: TwoNetSystem, images: np.ndarray, digits: np.ndarray) -> TwoNetReport:
    """
    One B-period of T^2 ticks: T A-updates (each after T ticks), then one
    B-update over the T received messages and an SG regression onto the
    true message gradients.
    """
    config = system.config
    T = config.T
    if images.shape[0] != T * T:
        raise_config_error(f"decoupled mode consumes chunks of T^2={T * T} ticks, got {images.shape[0]}")
    labels = system.labels_for(digits)
    messages, losses_a, errors_a = [], [], []
    for j in range(T):
        block = slice(j * T, (j + 1) * T)
        message, loss, err = _a_block(system, images[block], labels.count_odd[block])
        messages.append(np.array(message))
        losses_a.append(loss)
        errors_a.append(err)

    three_labels = labels.count_threes[T - 1 :: T]
    h, c = system.b_state
    caches, dlogits = [], []
    loss_b = err_b = 0.0
    for j, message in enumerate(messages):
        logits, h, c, cache = _b_tick(system.b, message, h, c)
        step_loss, dl = softmax_xent(logits, three_labels[j])
        loss_b += step_loss
        err_b += _error(logits, three_labels[j])
        caches.append(cache)
        dlogits.append(dl)
    check_finite("network B loss", np.array(loss_b))
    grads: dict[str, dict] = {}
    dh, dc = np.zeros_like(h), np.zeros_like(c)
    message_grads = [None] * T
    for j in reversed(range(T)):
        message_grads[j], dh, dc = _b_tick_backward(caches[j], dlogits[j], dh, dc, grads)
    _apply(system.b.parts(), grads)
    system.b_state = (h, c)
    system.b_updates += 1

    sg_loss = None
    if system.sg is not None:
        sg_loss = sg_update(system.sg, np.concatenate(messages), None, np.concatenate(message_grads))
    system._advance_history(digits)
    return TwoNetReport(
        loss_a=float(np.mean(losses_a)),
        loss_b=loss_b / T,
        error_a=float(np.mean(errors_a)),
        error_b=err_b / T,
        a_updates=system.a_updates,
        b_updates=system.b_updates,
        sg_loss=sg_loss,
    )


def two_net_step(system: TwoNetSystem, images: np.ndarray, digits: np.ndarray) -> TwoNetReport:
    if system.config.mode == MODE_LOCKED:
        return locked_joint_step(system, images, digits)
    return decoupled_step(system, images, digits)


def evaluate_two_net(
    system: TwoNetSystem, images: np.ndarray, digits: np.ndarray
) -> tuple[float, float]:
    """(A error, B error) on a fixed stream, from fresh states; parameters untouched."""
    T = system.config.T
    steps = (images.shape[0] // (T * T)) * T * T
    if steps == 0:
        raise_config_error(f"evaluation stream needs at least T^2={T * T} ticks")
    batch = images.shape[1]
    padded = np.concatenate([np.full((T * T - 1, batch), -1, dtype=np.int64), digits[:steps]])
    labels = stream_labels(padded, T)
    odd = labels.count_odd[T * T - 1 :]
    threes = labels.count_threes[T * T - 1 :][T - 1 :: T]
    result = joint_loss_and_grads(
        system.a,
        system.b,
        images[:steps],
        odd,
        threes,
        system.a.core.zero_state(batch),
        system.b.core.zero_state(batch),
        T,
    )
    return result.error_a, result.error_b
