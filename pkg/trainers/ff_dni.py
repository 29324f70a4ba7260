"""
ff_dni.py - feed-forward training with decoupled neural interfaces.

A network of N layers (N-1 hidden blocks of linear -> batchnorm -> relu,
then a linear classifier) is cut at its decoupled interfaces into
segments. Within a segment gradients are exact; across a cut the lower
segment is trained on feedback available immediately after its forward
pass (a synthetic gradient, an exponential average of old gradients, or
nothing) and the regression target for that feedback is produced later by
the segment above.

Execution follows the decoupled schedule: every layer, on finishing its
forward pass, receives its feedback and updates at once. Backward passes
only read forward-time caches, so the order in which segments apply
their updates within one step does not change the result. The stochastic
trainers still draw a random visiting order and report it.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, field
from typing import Any

# Import external packages
import numpy as np

# Import functions from local modules
from networks.bp_lambda import LambdaSchedule, check_lambda, fold_chain
from networks.layers import (
    BatchNormLayer,
    LinearLayer,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_xent,
)
from networks.synthetic_models import (
    SgModel,
    SyntheticInputModel,
    sg_predict,
    sg_update,
    synth_input_predict,
    synth_input_update,
)
from utils.utils_config import raise_config_error
from utils.utils_logger import logger
from utils.utils_numerics import DTYPE, check_finite, make_rng, prefixed, unprefixed

#####################################
# Default Configurations
#####################################

TRAINERS = (
    "backprop",
    "dni",
    "stochastic_dni",
    "stochastic_backprop",
    "complete_unlock",
    "stale_gradient",
    "bp_lambda",
)

#####################################
# Configuration Types
#####################################


@dataclass
class FfNetworkSpec:
    """Feed-forward network and trainer settings."""

    n_layers: int = 3
    hidden: int = 256
    input_dim: int = 784
    num_classes: int = 10
    placement: str = "every"
    conditioning: str = "dni"
    sg_hidden_layers: int = -1
    sg_hidden_width: int = 1024
    batchnorm: bool = True
    trainer: str = "dni"
    lr: float = 3e-5
    batch_size: int = 256
    p_update: float = 1.0
    stale_decay: float = 0.9
    bp_lambda: float = 1.0
    consume_synthetic_inputs: str = "when_busy"
    diagnostics: bool = False

    def validate(self) -> None:
        if not 2 <= self.n_layers <= 6:
            raise_config_error(f"n_layers must be in [2, 6], got {self.n_layers}")
        if self.conditioning not in ("dni", "cdni"):
            raise_config_error(f"conditioning must be dni or cdni, got {self.conditioning}")
        if self.trainer not in TRAINERS:
            raise_config_error(f"trainer must be one of {TRAINERS}, got {self.trainer}")
        if not 0.0 <= self.p_update <= 1.0:
            raise_config_error(f"p_update must be in [0, 1], got {self.p_update}")
        if self.consume_synthetic_inputs not in ("when_busy", "always"):
            raise_config_error(
                f"consume_synthetic_inputs must be when_busy or always, got {self.consume_synthetic_inputs}"
            )
        check_lambda(self.bp_lambda)
        self.decoupled_interfaces()

    def decoupled_interfaces(self) -> set[int]:
        """Interfaces i (on h_i, 1 <= i <= N-1) that carry a DNI."""
        if self.placement == "none":
            return set()
        if self.placement == "every":
            return set(range(1, self.n_layers))
        try:
            k = int(self.placement)
        except ValueError:
            raise_config_error(f"placement must be none, every or a layer index, got {self.placement}")
        if not 1 <= k <= self.n_layers - 1:
            raise_config_error(f"DNI placement {k} outside [1, {self.n_layers - 1}]")
        return {k}

    @property
    def sg_depth(self) -> int:
        if self.sg_hidden_layers >= 0:
            return self.sg_hidden_layers
        return 0 if self.conditioning == "cdni" else 2


#####################################
# Network
#####################################


@dataclass
class FfBlock:
    linear: LinearLayer
    norm: BatchNormLayer | None
    activation: bool

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, tuple]:
        h, lin_cache = linear_forward(self.linear, x)
        norm_cache = mask = None
        if self.norm is not None:
            h, norm_cache = batchnorm_forward(self.norm, h)
        if self.activation:
            h, mask = relu_forward(h)
        return h, (lin_cache, norm_cache, mask)

    def backward(self, cache: tuple, dh: np.ndarray) -> tuple[np.ndarray, dict[str, dict]]:
        lin_cache, norm_cache, mask = cache
        grads: dict[str, dict] = {}
        if mask is not None:
            dh = relu_backward(mask, dh)
        if norm_cache is not None:
            dh, dgamma, dbeta = batchnorm_backward(norm_cache, dh)
            grads["norm"] = {"gamma": dgamma, "beta": dbeta}
        dx, dW, db = linear_backward(lin_cache, dh)
        grads["linear"] = {"W": dW, "b": db}
        return dx, grads

    def parts(self) -> dict[str, Any]:
        named: dict[str, Any] = {"linear": self.linear}
        if self.norm is not None:
            named["norm"] = self.norm
        return named

    def apply_gradients(self, grads: dict[str, dict]) -> None:
        parts = self.parts()
        for name, part_grads in grads.items():
            parts[name].apply_gradients(part_grads)


@dataclass
class StaleGradientCache:
    """
    Exponential moving average of past interface gradients, per feature.

    Each refresh folds in the batch mean of the true gradient, and every
    sample of a later batch receives that same vector. With decay=0 the
    feedback is the previous step's batch-mean gradient, not a per-sample
    gradient; batches differ between steps, so samples have no stable identity.
    """

    width: int
    decay: float
    value: np.ndarray | None = None

    def current(self, batch: int) -> np.ndarray:
        if self.value is None:
            return np.zeros((batch, self.width), dtype=DTYPE)
        return np.broadcast_to(self.value, (batch, self.width)).copy()

    def refresh(self, gradient: np.ndarray) -> None:
        mean = gradient.mean(axis=0)
        previous = np.zeros(self.width, dtype=DTYPE) if self.value is None else self.value
        self.value = self.decay * previous + (1.0 - self.decay) * mean


@dataclass
class FfNetwork:
    spec: FfNetworkSpec
    blocks: list[FfBlock]
    sg_models: dict[int, SgModel] = field(default_factory=dict)
    input_models: dict[int, SyntheticInputModel] = field(default_factory=dict)
    stale: dict[int, StaleGradientCache] = field(default_factory=dict)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    @property
    def conditional(self) -> bool:
        return self.spec.conditioning == "cdni"

    def set_training(self, training: bool) -> None:
        for block in self.blocks:
            if block.norm is not None:
                block.norm.training = training
        for model in list(self.sg_models.values()) + list(self.input_models.values()):
            model.set_training(training)

    def set_learning_rate(self, lr: float) -> None:
        for block in self.blocks:
            for part in block.parts().values():
                part.set_learning_rate(lr)
        for model in list(self.sg_models.values()) + list(self.input_models.values()):
            model.set_learning_rate(lr)

    def trunk_parameters(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for idx, block in enumerate(self.blocks, start=1):
            for part_name, part in block.parts().items():
                for name, value in part.parameters().items():
                    out[f"layer{idx}.{part_name}.{name}"] = value
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for idx, block in enumerate(self.blocks, start=1):
            for part_name, part in block.parts().items():
                out.update(prefixed(f"layer{idx}.{part_name}", part.state_dict()))
        for idx, model in self.sg_models.items():
            out.update(prefixed(f"sg{idx}", model.state_dict()))
        for idx, model in self.input_models.items():
            out.update(prefixed(f"input{idx}", model.state_dict()))
        for idx, cache in self.stale.items():
            if cache.value is not None:
                out[f"stale{idx}.value"] = cache.value.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for idx, block in enumerate(self.blocks, start=1):
            for part_name, part in block.parts().items():
                part.load_state_dict(unprefixed(f"layer{idx}.{part_name}", state))
        for idx, model in self.sg_models.items():
            model.load_state_dict(unprefixed(f"sg{idx}", state))
        for idx, model in self.input_models.items():
            model.load_state_dict(unprefixed(f"input{idx}", state))
        for idx, cache in self.stale.items():
            key = f"stale{idx}.value"
            cache.value = np.array(state[key], dtype=DTYPE) if key in state else None


def build_ff_network(spec: FfNetworkSpec, rng: np.random.Generator) -> FfNetwork:
    """Trunk plus whatever feedback models the configured trainer needs."""
    spec.validate()
    blocks = []
    width_in = spec.input_dim
    for layer in range(1, spec.n_layers + 1):
        top = layer == spec.n_layers
        width_out = spec.num_classes if top else spec.hidden
        linear = LinearLayer.create(rng, width_in, width_out)
        linear.init_optimizer(spec.lr)
        norm = None
        if spec.batchnorm and not top:
            norm = BatchNormLayer.create(width_out)
            norm.init_optimizer(spec.lr)
        blocks.append(FfBlock(linear=linear, norm=norm, activation=not top))
        width_in = width_out

    net = FfNetwork(spec=spec, blocks=blocks)
    num_classes = spec.num_classes if spec.conditioning == "cdni" else None
    if spec.trainer in ("dni", "stochastic_dni"):
        interfaces = spec.decoupled_interfaces()
    elif spec.trainer in ("complete_unlock", "bp_lambda"):
        interfaces = set(range(1, spec.n_layers))
    else:
        interfaces = set()
    sg_depth = 1 if spec.trainer == "complete_unlock" else spec.sg_depth
    for idx in sorted(interfaces):
        net.sg_models[idx] = SgModel.create(
            rng,
            input_dim=spec.hidden,
            output_dim=spec.hidden,
            hidden_layers=sg_depth,
            hidden_width=spec.sg_hidden_width,
            num_classes=num_classes,
            batchnorm=spec.batchnorm,
            lr=spec.lr,
        )
    if spec.trainer == "complete_unlock":
        for layer in range(2, spec.n_layers + 1):
            net.input_models[layer] = SyntheticInputModel.create(
                rng,
                input_dim=spec.input_dim,
                output_dim=spec.hidden,
                hidden_layers=1,
                hidden_width=spec.sg_hidden_width,
                num_classes=num_classes,
                batchnorm=spec.batchnorm,
                lr=spec.lr,
            )
    if spec.trainer == "stale_gradient":
        for idx in sorted(spec.decoupled_interfaces() or set(range(1, spec.n_layers))):
            net.stale[idx] = StaleGradientCache(width=spec.hidden, decay=spec.stale_decay)
    logger.info(
        f"Built {spec.n_layers}-layer network for trainer={spec.trainer}, "
        f"{len(net.sg_models)} SG models, {len(net.input_models)} synthetic input models"
    )
    return net


#####################################
# Reports and Diagnostics
#####################################


@dataclass
class GradientDiagnostics:
    l2: float
    cosine: float
    sign_error_rate: float


def gradient_diagnostics(delta_hat: np.ndarray, delta_true: np.ndarray) -> GradientDiagnostics:
    """L2 distance, cosine similarity and fraction of dimensions with the wrong sign."""
    a = np.asarray(delta_hat, dtype=DTYPE).ravel()
    b = np.asarray(delta_true, dtype=DTYPE).ravel()
    norms = np.linalg.norm(a) * np.linalg.norm(b)
    cosine = float(a @ b / norms) if norms > 0.0 else 0.0
    return GradientDiagnostics(
        l2=float(np.linalg.norm(a - b)),
        cosine=cosine,
        sign_error_rate=float(np.mean(np.sign(a) != np.sign(b))) if a.size else 0.0,
    )


@dataclass
class TrainStepReport:
    task_loss: float
    sg_losses: dict[int, float] = field(default_factory=dict)
    input_losses: dict[int, float] = field(default_factory=dict)
    updated: list[int] = field(default_factory=list)
    order: list[int] = field(default_factory=list)
    diagnostics: dict[int, GradientDiagnostics] = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {"task_loss": self.task_loss, "layers_updated": float(len(self.updated))}
        for idx, loss in sorted(self.sg_losses.items()):
            out[f"sg_loss_{idx}"] = loss
        for idx, loss in sorted(self.input_losses.items()):
            out[f"input_loss_{idx}"] = loss
        for idx, diag in sorted(self.diagnostics.items()):
            out[f"grad_l2_{idx}"] = diag.l2
            out[f"grad_cos_{idx}"] = diag.cosine
            out[f"grad_sign_err_{idx}"] = diag.sign_error_rate
        return out


#####################################
# Scheduler
#####################################


@dataclass
class UpdateScheduler:
    """Random visiting order and per-unit Bernoulli(p_update) update decisions."""

    p_update: float = 1.0
    rng: np.random.Generator = field(default_factory=lambda: make_rng(0))

    def draw(self, units: int) -> tuple[list[int], list[bool]]:
        order = [int(i) for i in self.rng.permutation(units)]
        active = [bool(u < self.p_update) for u in self.rng.random(units)]
        return order, active


#####################################
# Segment Machinery
#####################################


@dataclass
class SegmentRun:
    layers: list[int]
    inputs: np.ndarray
    caches: list[tuple]
    output: np.ndarray
    top: int | None
    feedback: np.ndarray | None = None


def segments_for(n_layers: int, decoupled: set[int]) -> list[list[int]]:
    """Split layers 1..N into runs separated by the decoupled interfaces."""
    segments, current = [], []
    for layer in range(1, n_layers + 1):
        current.append(layer)
        if layer in decoupled or layer == n_layers:
            segments.append(current)
            current = []
    return segments


def _forward_segments(
    net: FfNetwork,
    x: np.ndarray,
    decoupled: set[int],
    feedback: str,
    cond: np.ndarray | None,
) -> list[SegmentRun]:
    runs = []
    h = x
    for layers in segments_for(net.n_layers, decoupled):
        seg_in = h
        caches = []
        for layer in layers:
            h, cache = net.blocks[layer - 1].forward(h)
            caches.append(cache)
        top = layers[-1] if layers[-1] < net.n_layers else None
        run = SegmentRun(layers=layers, inputs=seg_in, caches=caches, output=h, top=top)
        if top is not None:
            if feedback == "synthetic":
                if top not in net.sg_models:
                    raise_config_error(f"No SG model at decoupled interface {top}")
                run.feedback = sg_predict(net.sg_models[top], h, cond)
            elif feedback == "stale":
                run.feedback = net.stale[top].current(h.shape[0])
        runs.append(run)
    return runs


def _backward_segment(
    net: FfNetwork, run: SegmentRun, top_grad: np.ndarray
) -> tuple[np.ndarray, dict[int, dict]]:
    grads: dict[int, dict] = {}
    g = top_grad
    for layer, cache in zip(reversed(run.layers), reversed(run.caches)):
        g, grads[layer] = net.blocks[layer - 1].backward(cache, g)
    return g, grads


def _train_segments(
    net: FfNetwork,
    x: np.ndarray,
    y: np.ndarray,
    decoupled: set[int],
    feedback: str,
    order: list[int] | None = None,
    active: list[bool] | None = None,
) -> TrainStepReport:
    cond = y if net.conditional else None
    runs = _forward_segments(net, x, decoupled, feedback, cond)
    loss, dlogits = softmax_xent(runs[-1].output, y)
    check_finite("task loss", np.array(loss))
    count = len(runs)
    order = list(range(count)) if order is None else order
    active = [True] * count if active is None else active

    results: dict[int, tuple[np.ndarray, dict[int, dict]]] = {}
    for s in reversed(range(count)):
        if not active[s]:
            continue
        run = runs[s]
        if run.top is None:
            top_grad = dlogits
        elif feedback == "dropped":
            top_grad = results[s + 1][0] if (s + 1) in results else np.zeros_like(run.output)
        else:
            top_grad = run.feedback
        results[s] = _backward_segment(net, run, top_grad)

    report = TrainStepReport(task_loss=loss, order=order)
    for s in order:
        if s not in results:
            continue
        dx, grads = results[s]
        for layer, layer_grads in grads.items():
            net.blocks[layer - 1].apply_gradients(layer_grads)
            report.updated.append(layer)
        if s == 0:
            continue
        below = runs[s - 1]
        if feedback == "synthetic":
            report.sg_losses[below.top] = sg_update(net.sg_models[below.top], below.output, cond, dx)
        elif feedback == "stale":
            net.stale[below.top].refresh(dx)
        if net.spec.diagnostics and below.feedback is not None:
            report.diagnostics[below.top] = gradient_diagnostics(below.feedback, dx)
    report.updated.sort()
    return report


#####################################
# Training Steps
#####################################


def backprop_step(net: FfNetwork, x: np.ndarray, y: np.ndarray) -> TrainStepReport:
    """Exact end-to-end gradients and one Adam step per layer."""
    return _train_segments(net, x, y, decoupled=set(), feedback="synthetic")


def dni_step(
    net: FfNetwork, x: np.ndarray, y: np.ndarray, scheduler: UpdateScheduler | None = None
) -> TrainStepReport:
    """Every segment updates from its synthetic gradient, strictly bottom-up."""
    return _train_segments(net, x, y, decoupled=net.spec.decoupled_interfaces(), feedback="synthetic")


def stochastic_dni_step(
    net: FfNetwork, x: np.ndarray, y: np.ndarray, scheduler: UpdateScheduler
) -> TrainStepReport:
    """Full forward; each segment's backward/update happens with probability p_update."""
    decoupled = net.spec.decoupled_interfaces()
    order, active = scheduler.draw(len(segments_for(net.n_layers, decoupled)))
    return _train_segments(net, x, y, decoupled, "synthetic", order, active)


def stochastic_backprop_step(
    net: FfNetwork, x: np.ndarray, y: np.ndarray, scheduler: UpdateScheduler
) -> TrainStepReport:
    """
    No-DNI baseline for sporadic updates: a layer receives the true gradient
    only when the layer above ran its backward pass this step, zero otherwise.
    """
    decoupled = set(range(1, net.n_layers))
    order, active = scheduler.draw(net.n_layers)
    return _train_segments(net, x, y, decoupled, "dropped", order, active)


def stale_gradient_step(net: FfNetwork, x: np.ndarray, y: np.ndarray) -> TrainStepReport:
    """Feedback is the moving average of past interface gradients."""
    return _train_segments(net, x, y, decoupled=set(net.stale), feedback="stale")


def bp_lambda_step(net: FfNetwork, x: np.ndarray, y: np.ndarray, lam: float | None = None) -> TrainStepReport:
    """
    Mix backpropagated and synthetic gradients at every interface with a
    constant lambda; SG models regress onto the unrolled targets.
    """
    lam = net.spec.bp_lambda if lam is None else check_lambda(lam)
    cond = y if net.conditional else None
    h = x
    outputs, caches = [], []
    for block in net.blocks:
        h, cache = block.forward(h)
        outputs.append(h)
        caches.append(cache)
    loss, dlogits = softmax_xent(outputs[-1], y)

    n = net.n_layers
    synthetic: list[np.ndarray | None] = []
    for idx in range(1, n):
        synthetic.append(None if lam == 1.0 else sg_predict(net.sg_models[idx], outputs[idx - 1], cond))

    grads: dict[int, dict] = {}
    targets: dict[int, np.ndarray] = {}

    def jvp_for(layer: int):
        def jvp(g: np.ndarray) -> np.ndarray:
            dx, grads[layer] = net.blocks[layer - 1].backward(caches[layer - 1], g)
            targets[layer - 1] = dx
            return dx

        return jvp

    # positions h_1..h_N; jvps[j] maps h_{j+2} -> h_{j+1}
    jvps = [jvp_for(j + 2) for j in range(n - 1)]
    states = fold_chain(dlogits, jvps, synthetic, LambdaSchedule.constant(lam, n - 1))
    g_first = states[-1].gradient
    _, grads[1] = net.blocks[0].backward(caches[0], g_first)

    report = TrainStepReport(task_loss=loss)
    for layer in range(1, n + 1):
        net.blocks[layer - 1].apply_gradients(grads[layer])
        report.updated.append(layer)
    for idx in range(1, n):
        report.sg_losses[idx] = sg_update(net.sg_models[idx], outputs[idx - 1], cond, targets[idx])
        if net.spec.diagnostics and synthetic[idx - 1] is not None:
            report.diagnostics[idx] = gradient_diagnostics(synthetic[idx - 1], targets[idx])
    return report


def complete_unlock_step(
    net: FfNetwork, x: np.ndarray, y: np.ndarray, scheduler: UpdateScheduler
) -> TrainStepReport:
    """
    Every layer has an SG model on its output and a synthetic input model on
    its input. A busy layer (probability 1 - p_update) does neither pass;
    an active layer whose producer is busy reads the synthetic input.
    """
    if not net.input_models:
        raise_config_error("complete unlock needs synthetic input models")
    cond = y if net.conditional else None
    n = net.n_layers
    order, active = scheduler.draw(n)
    always_synthetic = net.spec.consume_synthetic_inputs == "always"

    outputs: dict[int, np.ndarray] = {}
    consumed: dict[int, np.ndarray] = {}
    caches: dict[int, tuple] = {}
    feedback: dict[int, np.ndarray] = {}
    report = TrainStepReport(task_loss=float("nan"), order=order)
    for layer in range(1, n + 1):
        if not active[layer - 1]:
            continue
        if layer == 1:
            inp = x
        elif (layer - 1) in outputs and not always_synthetic:
            inp = outputs[layer - 1]
        else:
            inp = synth_input_predict(net.input_models[layer], x, cond)
        consumed[layer] = inp
        outputs[layer], caches[layer] = net.blocks[layer - 1].forward(inp)
        if layer < n:
            feedback[layer] = sg_predict(net.sg_models[layer], outputs[layer], cond)

    if n in outputs:
        report.task_loss, feedback[n] = softmax_xent(outputs[n], y)

    results: dict[int, tuple[np.ndarray, dict]] = {}
    for layer in outputs:
        results[layer] = net.blocks[layer - 1].backward(caches[layer], feedback[layer])

    for idx in order:
        layer = idx + 1
        if layer not in results:
            continue
        dx, grads = results[layer]
        net.blocks[layer - 1].apply_gradients(grads)
        report.updated.append(layer)
        if layer == 1:
            continue
        below = layer - 1
        report.sg_losses[below] = sg_update(net.sg_models[below], consumed[layer], cond, dx)
        if below in outputs:
            report.input_losses[layer] = synth_input_update(
                net.input_models[layer], x, cond, outputs[below]
            )
    report.updated.sort()
    return report


#####################################
# Evaluation
#####################################


def predict(net: FfNetwork, x: np.ndarray) -> np.ndarray:
    """Plain chained forward with batchnorm in eval mode; no synthetic inputs."""
    net.set_training(False)
    try:
        h = x
        for block in net.blocks:
            h, _ = block.forward(h)
    finally:
        net.set_training(True)
    return h


def evaluate(net: FfNetwork, images: np.ndarray, labels: np.ndarray, batch: int = 1000) -> float:
    """Classification error rate in [0, 1]."""
    wrong = 0
    for start in range(0, images.shape[0], batch):
        logits = predict(net, images[start : start + batch])
        wrong += int((logits.argmax(axis=1) != labels[start : start + batch]).sum())
    return wrong / max(1, images.shape[0])


def train_step(
    net: FfNetwork, x: np.ndarray, y: np.ndarray, scheduler: UpdateScheduler
) -> TrainStepReport:
    """Dispatch to the step named by net.spec.trainer."""
    trainer = net.spec.trainer
    if trainer == "backprop":
        return backprop_step(net, x, y)
    if trainer == "dni":
        return dni_step(net, x, y, scheduler)
    if trainer == "stochastic_dni":
        return stochastic_dni_step(net, x, y, scheduler)
    if trainer == "stochastic_backprop":
        return stochastic_backprop_step(net, x, y, scheduler)
    if trainer == "complete_unlock":
        return complete_unlock_step(net, x, y, scheduler)
    if trainer == "stale_gradient":
        return stale_gradient_step(net, x, y)
    return bp_lambda_step(net, x, y)
