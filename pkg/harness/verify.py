"""
verify.py - named self-checks for the numerical building blocks.

Each check returns a CheckResult; `run_checks` runs them all and never
raises for a failing check. The layer operations are looked up through a
GradientOps bundle so a broken implementation can be injected and caught.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, field
from typing import Callable

# Import external packages
import numpy as np
import pandas as pd

# Import functions from local modules
from networks import layers
from networks.bp_lambda import LambdaSchedule, fold_chain, geometric_weights
from networks.synthetic_models import SgModel, SyntheticInputModel
from trainers.ff_dni import FfNetworkSpec, backprop_step, bp_lambda_step, build_ff_network, dni_step
from utils.utils_logger import logger
from utils.utils_numerics import AdamState, adam_step, finite_diff_grad, make_rng, relative_error

#####################################
# Default Configurations
#####################################

GRAD_TOLERANCE = 1e-6
EXACT_TOLERANCE = 1e-10

#####################################
# Types
#####################################


@dataclass
class GradientOps:
    linear_forward: Callable = layers.linear_forward
    linear_backward: Callable = layers.linear_backward
    batchnorm_forward: Callable = layers.batchnorm_forward
    batchnorm_backward: Callable = layers.batchnorm_backward
    standardize_forward: Callable = layers.standardize_forward
    standardize_backward: Callable = layers.standardize_backward
    softmax_xent: Callable = layers.softmax_xent
    sigmoid_bce: Callable = layers.sigmoid_bce
    lstm_step_forward: Callable = layers.lstm_step_forward
    lstm_step_backward: Callable = layers.lstm_step_backward
    adam_step: Callable = adam_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float = 0.0
    detail: str = ""


@dataclass
class CheckContext:
    ops: GradientOps = field(default_factory=GradientOps)
    seed: int = 0

    def rng(self, salt: int) -> np.random.Generator:
        return make_rng(self.seed * 1000 + salt)


def _grad_result(name: str, pairs: dict[str, tuple[np.ndarray, np.ndarray]]) -> CheckResult:
    errors = {key: relative_error(analytic, numeric) for key, (analytic, numeric) in pairs.items()}
    worst = max(errors, key=errors.get)
    return CheckResult(
        name=name,
        passed=errors[worst] < GRAD_TOLERANCE,
        error=errors[worst],
        detail=f"worst {worst}",
    )


#####################################
# Gradient Checks
#####################################


def check_adam_bias_correction(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(1)
    grad = rng.standard_normal((3, 4))
    state = AdamState.for_param(np.zeros_like(grad), lr=1e-3)
    updated, _ = ctx.ops.adam_step(np.zeros_like(grad), grad, state)
    expected = -1e-3 * grad / (np.abs(grad) + state.eps)
    err = float(np.max(np.abs(updated - expected)))
    return CheckResult("adam_bias_correction", err < EXACT_TOLERANCE, err)


def check_linear_grad(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(2)
    layer = layers.LinearLayer.create(rng, 5, 4)
    layer.b = rng.standard_normal(4)
    x = rng.standard_normal((3, 5))
    cotangent = rng.standard_normal((3, 4))
    ops = ctx.ops

    def loss(x_, W_, b_):
        y, _ = ops.linear_forward(layers.LinearLayer(W=W_, b=b_), x_)
        return float((y * cotangent).sum())

    _, cache = ops.linear_forward(layer, x)
    dx, dW, db = ops.linear_backward(cache, cotangent)
    return _grad_result(
        "linear_grad",
        {
            "x": (dx, finite_diff_grad(lambda v: loss(v, layer.W, layer.b), x)),
            "W": (dW, finite_diff_grad(lambda v: loss(x, v, layer.b), layer.W)),
            "b": (db, finite_diff_grad(lambda v: loss(x, layer.W, v), layer.b)),
        },
    )


def check_batchnorm_grad(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(3)
    norm = layers.BatchNormLayer.create(4)
    norm.gamma = rng.uniform(0.5, 1.5, 4)
    norm.beta = rng.standard_normal(4)
    x = rng.standard_normal((6, 4))
    cotangent = rng.standard_normal((6, 4))
    ops = ctx.ops

    def loss(x_, gamma_):
        saved = norm.gamma
        norm.gamma = gamma_
        y, _ = ops.batchnorm_forward(norm, x_)
        norm.gamma = saved
        return float((y * cotangent).sum())

    _, cache = ops.batchnorm_forward(norm, x)
    dx, dgamma, dbeta = ops.batchnorm_backward(cache, cotangent)
    return _grad_result(
        "batchnorm_grad",
        {
            "x": (dx, finite_diff_grad(lambda v: loss(v, norm.gamma), x)),
            "gamma": (dgamma, finite_diff_grad(lambda v: loss(x, v), norm.gamma)),
            "beta": (dbeta, cotangent.sum(axis=0)),
        },
    )


def check_standardize_grad(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(4)
    x = rng.standard_normal((5, 3))
    cotangent = rng.standard_normal((5, 3))
    ops = ctx.ops
    _, cache = ops.standardize_forward(x)
    dx = ops.standardize_backward(cache, cotangent)
    numeric = finite_diff_grad(lambda v: float((ops.standardize_forward(v)[0] * cotangent).sum()), x)
    return _grad_result("standardize_grad", {"x": (dx, numeric)})


def check_relu_softmax_grad(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(5)
    # keep pre-activations away from the relu kink
    x = rng.standard_normal((4, 6))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    labels = rng.integers(0, 6, size=4)
    ops = ctx.ops

    def loss(v):
        h, _ = layers.relu_forward(v)
        return ops.softmax_xent(h, labels)[0]

    h, mask = layers.relu_forward(x)
    _, dh = ops.softmax_xent(h, labels)
    dx = layers.relu_backward(mask, dh)
    return _grad_result("relu_softmax_grad", {"x": (dx, finite_diff_grad(loss, x))})


def check_sigmoid_bce_grad(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(6)
    logits = rng.standard_normal((4, 5))
    targets = (rng.random((4, 5)) < 0.5).astype(float)
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    ops = ctx.ops
    _, dlogits = ops.sigmoid_bce(logits, targets, mask)
    numeric = finite_diff_grad(lambda v: ops.sigmoid_bce(v, targets, mask)[0], logits)
    return _grad_result("sigmoid_bce_grad", {"logits": (dlogits, numeric)})


def check_lstm_unroll_grad(ctx: CheckContext, steps: int = 5) -> CheckResult:
    """Five-step unroll: analytic BPTT against finite differences."""
    rng = ctx.rng(7)
    units, n_in, batch = 3, 2, 2
    core = layers.LstmCore.create(rng, n_in, units)
    xs = rng.standard_normal((steps, batch, n_in))
    cotangents = rng.standard_normal((steps, batch, units))
    h0 = rng.standard_normal((batch, units)) * 0.5
    c0 = rng.standard_normal((batch, units)) * 0.5
    ops = ctx.ops

    def loss(Wx, Wh, b, h_init):
        net = layers.LstmCore(Wx=Wx, Wh=Wh, b=b)
        h, c, total = h_init, c0, 0.0
        for t in range(steps):
            h, c, _ = ops.lstm_step_forward(net, xs[t], h, c)
            total += float((h * cotangents[t]).sum())
        return total

    h, c, caches = h0, c0, []
    for t in range(steps):
        h, c, cache = ops.lstm_step_forward(core, xs[t], h, c)
        caches.append(cache)
    dh, dc = np.zeros_like(h), np.zeros_like(c)
    grads: dict[str, np.ndarray] = {}
    for t in reversed(range(steps)):
        step = ops.lstm_step_backward(caches[t], dh + cotangents[t], dc)
        layers.add_grads(grads, step.params)
        dh, dc = step.dh_prev, step.dc_prev
    return _grad_result(
        "lstm_unroll_grad",
        {
            "Wx": (grads["Wx"], finite_diff_grad(lambda v: loss(v, core.Wh, core.b, h0), core.Wx)),
            "Wh": (grads["Wh"], finite_diff_grad(lambda v: loss(core.Wx, v, core.b, h0), core.Wh)),
            "b": (grads["b"], finite_diff_grad(lambda v: loss(core.Wx, core.Wh, v, h0), core.b)),
            "h0": (dh, finite_diff_grad(lambda v: loss(core.Wx, core.Wh, core.b, v), h0)),
        },
    )


#####################################
# Behavioural Checks
#####################################


def _tiny_spec(trainer: str) -> FfNetworkSpec:
    return FfNetworkSpec(
        n_layers=3,
        hidden=8,
        input_dim=6,
        num_classes=3,
        sg_hidden_width=8,
        trainer=trainer,
        lr=1e-3,
        batch_size=8,
    )


def check_zero_init_models(ctx: CheckContext) -> CheckResult:
    rng = ctx.rng(8)
    sg = SgModel.create(rng, input_dim=5, output_dim=5, hidden_layers=2, hidden_width=7)
    synth = SyntheticInputModel.create(rng, input_dim=4, output_dim=5, hidden_layers=1, hidden_width=7)
    h = rng.standard_normal((6, 5))
    x = rng.standard_normal((6, 4))
    err = float(max(np.max(np.abs(sg.forward(h))), np.max(np.abs(synth.forward(x)))))
    return CheckResult("zero_init_models", err == 0.0, err)


def check_first_dni_step_locality(ctx: CheckContext) -> CheckResult:
    """With fresh SG models only the top layer moves on the first step."""
    rng = ctx.rng(9)
    net = build_ff_network(_tiny_spec("dni"), rng)
    before = {k: v.copy() for k, v in net.trunk_parameters().items()}
    x = rng.uniform(0.0, 1.0, (8, 6))
    y = rng.integers(0, 3, size=8)
    dni_step(net, x, y)
    after = net.trunk_parameters()
    moved_below = max(float(np.max(np.abs(after[k] - before[k]))) for k in before if not k.startswith("layer3."))
    moved_top = max(float(np.max(np.abs(after[k] - before[k]))) for k in before if k.startswith("layer3."))
    return CheckResult(
        "first_dni_step_locality",
        moved_below == 0.0 and moved_top > 0.0,
        moved_below,
        detail=f"top layer moved {moved_top:.3g}",
    )


def check_bp_lambda_one_is_backprop(ctx: CheckContext, steps: int = 3) -> CheckResult:
    spec_lambda = _tiny_spec("bp_lambda")
    spec_bp = _tiny_spec("backprop")
    net_lambda = build_ff_network(spec_lambda, ctx.rng(10))
    net_bp = build_ff_network(spec_bp, ctx.rng(10))
    data = ctx.rng(11)
    for _ in range(steps):
        x = data.uniform(0.0, 1.0, (8, 6))
        y = data.integers(0, 3, size=8)
        bp_lambda_step(net_lambda, x, y, lam=1.0)
        backprop_step(net_bp, x, y)
    ours, theirs = net_lambda.trunk_parameters(), net_bp.trunk_parameters()
    err = max(float(np.max(np.abs(ours[k] - theirs[k]))) for k in ours)
    return CheckResult("bp_lambda_one_is_backprop", err < EXACT_TOLERANCE, err)


def check_geometric_weights(ctx: CheckContext) -> CheckResult:
    lambdas = ctx.rng(12).uniform(0.0, 1.0, 6)
    weights = geometric_weights(lambdas)
    err = abs(float(weights.sum()) - 1.0)
    return CheckResult("geometric_weights_simplex", err < EXACT_TOLERANCE and bool(np.all(weights >= 0.0)), err)


def check_oracle_mixing(ctx: CheckContext) -> CheckResult:
    """Mixing with exact synthetic gradients returns the exact gradient for any lambda."""
    rng = ctx.rng(13)
    maps = [rng.standard_normal((4, 4)) for _ in range(3)]
    top = rng.standard_normal((2, 4))
    exact = [top]
    for A in reversed(maps):
        exact.insert(0, exact[0] @ A)
    jvps = [lambda g, A=A: g @ A for A in maps]
    worst = 0.0
    for lam in (0.0, 0.3, 1.0):
        states = fold_chain(top, jvps, exact[:-1], LambdaSchedule.constant(lam, len(maps)))
        for state in states:
            worst = max(worst, float(np.max(np.abs(state.gradient - exact[state.position]))))
    return CheckResult("oracle_mixing", worst < EXACT_TOLERANCE, worst)


CHECKS: list[Callable[[CheckContext], CheckResult]] = [
    check_adam_bias_correction,
    check_linear_grad,
    check_batchnorm_grad,
    check_standardize_grad,
    check_relu_softmax_grad,
    check_sigmoid_bce_grad,
    check_lstm_unroll_grad,
    check_zero_init_models,
    check_first_dni_step_locality,
    check_bp_lambda_one_is_backprop,
    check_geometric_weights,
    check_oracle_mixing,
]

#####################################
# Runner
#####################################


def run_checks(ops: GradientOps | None = None, seed: int = 0) -> list[CheckResult]:
    ctx = CheckContext(ops=ops or GradientOps(), seed=seed)
    results = []
    for check in CHECKS:
        try:
            result = check(ctx)
        except Exception as e:
            result = CheckResult(name=check.__name__.removeprefix("check_"), passed=False, detail=repr(e))
        if result.passed:
            logger.info(f"PASS {result.name} (err {result.error:.3g})")
        else:
            logger.error(f"FAIL {result.name} (err {result.error:.3g}) {result.detail}")
        results.append(result)
    return results


def results_table(results: list[CheckResult]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"check": r.name, "passed": r.passed, "error": r.error, "detail": r.detail} for r in results]
    )
