"""
layers.py - differentiable building blocks with hand-derived backward passes.

Every forward returns (output, cache); the matching backward consumes the
cache from the immediately preceding forward with identical inputs. No
autodiff tape: each gradient below is written out by hand and checked
against finite differences in tests/test_layers.py.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, field

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_numerics import (
    DTYPE,
    Parametric,
    glorot,
    matmul,
    raise_dimension_error,
)

#####################################
# Default Configurations
#####################################

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LSTM_FORGET_BIAS = 1.0

#####################################
# Linear
#####################################


@dataclass
class LinearLayer(Parametric):
    W: np.ndarray
    b: np.ndarray
    param_names = ("W", "b")

    @classmethod
    def create(
        cls, rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False
    ) -> "LinearLayer":
        if zero:
            return cls(W=np.zeros((n_out, n_in), dtype=DTYPE), b=np.zeros(n_out, dtype=DTYPE))
        return cls(W=glorot(rng, n_out, n_in), b=np.zeros(n_out, dtype=DTYPE))

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class LinearCache:
    x: np.ndarray
    W: np.ndarray


def linear_forward(layer: LinearLayer, x: np.ndarray) -> tuple[np.ndarray, LinearCache]:
    """y = x W^T + b for x of shape [batch x in]."""
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise_dimension_error(f"linear expects [batch x {layer.n_in}], got {x.shape}")
    y = matmul(x, layer.W.T) + layer.b
    return y, LinearCache(x=x, W=layer.W)


def linear_backward(
    cache: LinearCache, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dW, db)."""
    if dy.shape != (cache.x.shape[0], cache.W.shape[0]):
        raise_dimension_error(
            f"linear backward got dy {dy.shape}, forward output was "
            f"{(cache.x.shape[0], cache.W.shape[0])}"
        )
    dx = matmul(dy, cache.W)
    dW = matmul(dy.T, cache.x)
    db = dy.sum(axis=0)
    return dx, dW, db


#####################################
# Batch Normalization
#####################################


@dataclass
class BatchNormLayer(Parametric):
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    training: bool = True
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    @classmethod
    def create(cls, features: int, **kwargs) -> "BatchNormLayer":
        return cls(
            gamma=np.ones(features, dtype=DTYPE),
            beta=np.zeros(features, dtype=DTYPE),
            running_mean=np.zeros(features, dtype=DTYPE),
            running_var=np.ones(features, dtype=DTYPE),
            **kwargs,
        )


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool


def batchnorm_forward(
    layer: BatchNormLayer, x: np.ndarray
) -> tuple[np.ndarray, BatchNormCache]:
    """
    Normalize each feature over the batch (train) or with running stats (eval).

    Train mode also updates the running statistics in place.
    """
    if x.ndim != 2 or x.shape[1] != layer.gamma.shape[0]:
        raise_dimension_error(f"batchnorm expects [batch x {layer.gamma.shape[0]}], got {x.shape}")
    if layer.training:
        n = x.shape[0]
        if n < 2:
            raise_dimension_error("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        layer.running_mean = (1.0 - layer.momentum) * layer.running_mean + layer.momentum * mean
        layer.running_var = (1.0 - layer.momentum) * layer.running_var + layer.momentum * (
            var * n / (n - 1)
        )
    else:
        mean, var = layer.running_mean, layer.running_var
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    x_hat = (x - mean) * inv_std
    y = layer.gamma * x_hat + layer.beta
    return y, BatchNormCache(x_hat=x_hat, inv_std=inv_std, gamma=layer.gamma, training=layer.training)


def batchnorm_backward(
    cache: BatchNormCache, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (dx, dgamma, dbeta)."""
    if dy.shape != cache.x_hat.shape:
        raise_dimension_error(f"batchnorm backward got dy {dy.shape}, expected {cache.x_hat.shape}")
    dgamma = (dy * cache.x_hat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx_hat = dy * cache.gamma
    if not cache.training:
        return dx_hat * cache.inv_std, dgamma, dbeta
    dx = _normalized_input_grad(dx_hat, cache.x_hat, cache.inv_std)
    return dx, dgamma, dbeta


def _normalized_input_grad(dx_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    n = dx_hat.shape[0]
    return (inv_std / n) * (
        n * dx_hat - dx_hat.sum(axis=0) - x_hat * (dx_hat * x_hat).sum(axis=0)
    )


@dataclass
class StandardizeCache:
    x_hat: np.ndarray
    inv_std: np.ndarray


def standardize_forward(x: np.ndarray, eps: float = BN_EPS) -> tuple[np.ndarray, StandardizeCache]:
    """Batch standardization without learnable affine parameters."""
    if x.ndim != 2 or x.shape[0] < 2:
        raise_dimension_error(f"standardize expects [batch>=2 x features], got {x.shape}")
    inv_std = 1.0 / np.sqrt(x.var(axis=0) + eps)
    x_hat = (x - x.mean(axis=0)) * inv_std
    return x_hat, StandardizeCache(x_hat=x_hat, inv_std=inv_std)


def standardize_backward(cache: StandardizeCache, dy: np.ndarray) -> np.ndarray:
    return _normalized_input_grad(dy, cache.x_hat, cache.inv_std)


#####################################
# Activations and Losses
#####################################


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    if dy.shape != mask.shape:
        raise_dimension_error(f"relu backward got dy {dy.shape}, expected {mask.shape}")
    return dy * mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """
    Mean cross-entropy over the batch for integer labels.

    Returns (loss, dlogits) with dlogits already divided by the batch size.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise_dimension_error(f"softmax_xent got logits {logits.shape} and labels {labels.shape}")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared error summed over features, averaged over the batch."""
    if pred.shape != target.shape:
        raise_dimension_error(f"l2_loss got pred {pred.shape} and target {target.shape}")
    n = pred.shape[0] if pred.ndim > 1 else 1
    diff = pred - target
    return float((diff * diff).sum() / n), 2.0 * diff / n


def sigmoid_bce(
    logits: np.ndarray, targets: np.ndarray, mask: np.ndarray | None = None
) -> tuple[float, np.ndarray]:
    """
    Masked binary cross-entropy (nats) summed over units, averaged over the batch.

    mask has shape [batch] and zeroes out whole rows.
    """
    if logits.shape != targets.shape:
        raise_dimension_error(f"sigmoid_bce got logits {logits.shape} and targets {targets.shape}")
    n = logits.shape[0]
    weights = np.ones(n, dtype=DTYPE) if mask is None else np.asarray(mask, dtype=DTYPE)
    # log(1 + exp(-|z|)) keeps both tails finite
    per_unit = np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    loss = float((per_unit.sum(axis=1) * weights).sum() / n)
    dlogits = (sigmoid(logits) - targets) * weights[:, None] / n
    return loss, dlogits


#####################################
# LSTM
#####################################


@dataclass
class LstmCore(Parametric):
    """LSTM without peepholes; gate rows ordered (input, forget, cell, output)."""

    Wx: np.ndarray
    Wh: np.ndarray
    b: np.ndarray
    param_names = ("Wx", "Wh", "b")

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        n_in: int,
        units: int,
        forget_bias: float = LSTM_FORGET_BIAS,
    ) -> "LstmCore":
        b = np.zeros(4 * units, dtype=DTYPE)
        b[units : 2 * units] = forget_bias
        return cls(
            Wx=glorot(rng, 4 * units, n_in),
            Wh=glorot(rng, 4 * units, units),
            b=b,
        )

    @property
    def units(self) -> int:
        return self.Wh.shape[1]

    def zero_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        return (
            np.zeros((batch, self.units), dtype=DTYPE),
            np.zeros((batch, self.units), dtype=DTYPE),
        )


@dataclass
class LstmCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray
    o: np.ndarray
    tanh_c: np.ndarray
    Wx: np.ndarray
    Wh: np.ndarray


@dataclass
class LstmGrads:
    dx: np.ndarray
    dh_prev: np.ndarray
    dc_prev: np.ndarray
    params: dict[str, np.ndarray] = field(default_factory=dict)


def lstm_step_forward(
    core: LstmCore, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray
) -> tuple[np.ndarray, np.ndarray, LstmCache]:
    """One LSTM step: c = f*c_prev + i*g, h = o*tanh(c)."""
    u = core.units
    batch = x.shape[0]
    if x.ndim != 2 or x.shape[1] != core.Wx.shape[1]:
        raise_dimension_error(f"lstm expects x [batch x {core.Wx.shape[1]}], got {x.shape}")
    if h_prev.shape != (batch, u) or c_prev.shape != (batch, u):
        raise_dimension_error(
            f"lstm state shapes {h_prev.shape}/{c_prev.shape} do not match [{batch} x {u}]"
        )
    z = matmul(x, core.Wx.T) + matmul(h_prev, core.Wh.T) + core.b
    i = sigmoid(z[:, :u])
    f = sigmoid(z[:, u : 2 * u])
    g = np.tanh(z[:, 2 * u : 3 * u])
    o = sigmoid(z[:, 3 * u :])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    cache = LstmCache(
        x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, g=g, o=o, tanh_c=tanh_c, Wx=core.Wx, Wh=core.Wh
    )
    return h, c, cache


def lstm_step_backward(cache: LstmCache, dh: np.ndarray, dc: np.ndarray) -> LstmGrads:
    """Return dx, dh_prev, dc_prev and parameter grads {Wx, Wh, b}."""
    if dh.shape != cache.o.shape or dc.shape != cache.o.shape:
        raise_dimension_error(
            f"lstm backward got dh {dh.shape}, dc {dc.shape}, expected {cache.o.shape}"
        )
    do = dh * cache.tanh_c
    dc_total = dc + dh * cache.o * (1.0 - cache.tanh_c**2)
    di = dc_total * cache.g
    df = dc_total * cache.c_prev
    dg = dc_total * cache.i
    dc_prev = dc_total * cache.f
    dz = np.concatenate(
        [
            di * cache.i * (1.0 - cache.i),
            df * cache.f * (1.0 - cache.f),
            dg * (1.0 - cache.g**2),
            do * cache.o * (1.0 - cache.o),
        ],
        axis=1,
    )
    return LstmGrads(
        dx=matmul(dz, cache.Wx),
        dh_prev=matmul(dz, cache.Wh),
        dc_prev=dc_prev,
        params={
            "Wx": matmul(dz.T, cache.x),
            "Wh": matmul(dz.T, cache.h_prev),
            "b": dz.sum(axis=0),
        },
    )


def add_grads(total: dict[str, np.ndarray], extra: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients by name."""
    for name, grad in extra.items():
        total[name] = total[name] + grad if name in total else grad
    return total
