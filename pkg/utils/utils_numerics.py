"""
utils_numerics.py - dense f64 arithmetic shared by every module.

Tensors are plain numpy float64 arrays in row-major (C) order. This module
adds the few pieces the rest of the engine needs on top of numpy:
checked matmul, a seeded counter-based RNG, Adam with bias correction,
a central finite-difference gradient oracle and the Parametric mixin that
gives layers named parameters, optimizer state and checkpoint dicts.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass
from typing import Any, Callable

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_config import raise_config_error
from utils.utils_logger import logger

#####################################
# Default Configurations
#####################################

DTYPE = np.float64
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8

#####################################
# Errors
#####################################


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


def raise_dimension_error(msg: str) -> None:
    logger.error(msg)
    raise DimensionError(msg)


#####################################
# Tensors
#####################################


def as_tensor(x: Any) -> np.ndarray:
    """Return x as a contiguous float64 array."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product of a [m x k] and b [k x n].

    Raises:
        DimensionError: If either operand is not 2-D or inner dims differ.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise_dimension_error(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise_dimension_error(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b


def check_shape(name: str, x: np.ndarray, shape: tuple[int, ...]) -> None:
    if x.shape != shape:
        raise_dimension_error(f"{name} has shape {x.shape}, expected {shape}")


def check_finite(name: str, x: np.ndarray) -> None:
    """Raise FloatingPointError if x holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        msg = f"Non-finite values in {name}"
        logger.error(msg)
        raise FloatingPointError(msg)


def detach(x: np.ndarray) -> np.ndarray:
    """Copy x into a read-only array so it can serve as a constant target."""
    out = np.array(x, dtype=DTYPE, copy=True)
    out.flags.writeable = False
    return out


#####################################
# Random Numbers
#####################################


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox generator; identical streams on every platform."""
    return np.random.Generator(np.random.Philox(int(seed)))


def rng_state_to_json(rng: np.random.Generator) -> dict:
    """Convert a Philox generator state into JSON-safe values."""

    def convert(value: Any) -> Any:
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, np.ndarray):
            return {"__uint64__": [int(v) for v in value]}
        return value

    return convert(rng.bit_generator.state)


def rng_state_from_json(state: dict) -> np.random.Generator:
    """Rebuild a Philox generator from rng_state_to_json output."""

    def convert(value: Any) -> Any:
        if isinstance(value, dict):
            if "__uint64__" in value:
                return np.array(value["__uint64__"], dtype=np.uint64)
            return {k: convert(v) for k, v in value.items()}
        return value

    rng = make_rng(0)
    rng.bit_generator.state = convert(state)
    return rng


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    """Uniform Glorot init for a [fan_out x fan_in] weight matrix."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


#####################################
# Adam
#####################################


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param), lr=lr)


def adam_step(
    params: np.ndarray, grad: np.ndarray, state: AdamState
) -> tuple[np.ndarray, AdamState]:
    """
    One Adam update with bias-corrected moments.

    Returns the new parameter array; the state is advanced in place
    and returned for convenience.
    """
    if params.shape != grad.shape or state.m.shape != params.shape:
        raise_dimension_error(
            f"adam_step shapes differ: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}"
        )
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


#####################################
# Gradient Oracle
#####################################


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    x = np.array(x, dtype=DTYPE, copy=True)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for j in range(flat_x.size):
        original = flat_x[j]
        flat_x[j] = original + h
        f_plus = f(x.copy())
        flat_x[j] = original - h
        f_minus = f(x.copy())
        flat_x[j] = original
        flat_g[j] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-based relative error, 0 when both are zero."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(denom, 1e-300))


#####################################
# Parametric Mixin
#####################################


class Parametric:
    """
    Named parameters with per-parameter Adam state.

    Subclasses list their trainable attribute names in `param_names` and
    any extra persistent arrays (running statistics) in `buffer_names`.
    """

    param_names: tuple[str, ...] = ()
    buffer_names: tuple[str, ...] = ()

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.param_names}

    def _optim(self) -> dict[str, AdamState]:
        if not hasattr(self, "_adam") or self._adam is None:
            self._adam = {}
        return self._adam

    def init_optimizer(self, lr: float) -> None:
        self._adam = {
            name: AdamState.for_param(getattr(self, name), lr) for name in self.param_names
        }

    def set_learning_rate(self, lr: float) -> None:
        for state in self._optim().values():
            state.lr = lr

    def apply_gradients(self, grads: dict[str, np.ndarray]) -> None:
        """Adam-update every parameter named in grads."""
        optim = self._optim()
        for name, grad in grads.items():
            if name not in optim:
                raise_config_error(
                    f"{type(self).__name__}.{name} has no optimizer state; call init_optimizer first"
                )
            new_value, _ = adam_step(getattr(self, name), grad, optim[name])
            setattr(self, name, new_value)

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in self.param_names + self.buffer_names:
            out[name] = np.array(getattr(self, name), copy=True)
        for name, state in self._optim().items():
            out[f"adam.{name}.m"] = state.m.copy()
            out[f"adam.{name}.v"] = state.v.copy()
            out[f"adam.{name}.hyper"] = np.array(
                [state.t, state.lr, state.beta1, state.beta2, state.eps], dtype=DTYPE
            )
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name in self.param_names + self.buffer_names:
            setattr(self, name, np.array(state[name], dtype=DTYPE))
        optim = {}
        for name in self.param_names:
            key = f"adam.{name}.hyper"
            if key not in state:
                continue
            t, lr, beta1, beta2, eps = state[key]
            optim[name] = AdamState(
                m=np.array(state[f"adam.{name}.m"], dtype=DTYPE),
                v=np.array(state[f"adam.{name}.v"], dtype=DTYPE),
                t=int(t),
                lr=float(lr),
                beta1=float(beta1),
                beta2=float(beta2),
                eps=float(eps),
            )
        self._adam = optim


def prefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(prefix: str, state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    head = f"{prefix}."
    return {k[len(head):]: v for k, v in state.items() if k.startswith(head)}
