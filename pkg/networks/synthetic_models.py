"""
synthetic_models.py - learned feedback models for decoupled interfaces.

An SgModel maps an activation h (optionally concatenated with a one-hot
label, the conditional variant) to a predicted gradient of the loss with
respect to h. A SyntheticInputModel maps the raw network input to a
predicted activation for a layer whose upstream producer is busy.

Both share the same MLP family: (linear -> batchnorm -> relu)* -> linear,
with the final linear layer zero-initialised so a fresh model outputs
exactly zero.
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
from networks.layers import (
    BatchNormLayer,
    LinearLayer,
    batchnorm_backward,
    batchnorm_forward,
    l2_loss,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
)
from utils.utils_config import raise_config_error
from utils.utils_numerics import DTYPE, check_finite, detach, prefixed, unprefixed

#####################################
# Model Definitions
#####################################


@dataclass
class HiddenUnit:
    linear: LinearLayer
    norm: BatchNormLayer | None


@dataclass
class AuxiliaryNet:
    """MLP whose last layer starts at exactly zero."""

    input_dim: int
    output_dim: int
    hidden: list[HiddenUnit]
    head: LinearLayer
    num_classes: int | None = None
    _caches: list[Any] = field(default_factory=list, repr=False)

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        input_dim: int,
        output_dim: int,
        hidden_layers: int = 2,
        hidden_width: int = 1024,
        num_classes: int | None = None,
        batchnorm: bool = True,
        lr: float = 3e-5,
    ) -> "AuxiliaryNet":
        if hidden_layers not in (0, 1, 2):
            raise_config_error(f"hidden_layers must be 0, 1 or 2, got {hidden_layers}")
        width_in = input_dim + (num_classes or 0)
        hidden = []
        for _ in range(hidden_layers):
            hidden.append(
                HiddenUnit(
                    linear=LinearLayer.create(rng, width_in, hidden_width),
                    norm=BatchNormLayer.create(hidden_width) if batchnorm else None,
                )
            )
            width_in = hidden_width
        head = LinearLayer.create(rng, width_in, output_dim, zero=True)
        model = cls(
            input_dim=input_dim,
            output_dim=output_dim,
            hidden=hidden,
            head=head,
            num_classes=num_classes,
        )
        model.init_optimizer(lr)
        return model

    @property
    def conditional(self) -> bool:
        return self.num_classes is not None

    def layers(self) -> dict[str, Any]:
        named: dict[str, Any] = {}
        for idx, unit in enumerate(self.hidden):
            named[f"hidden{idx}.linear"] = unit.linear
            if unit.norm is not None:
                named[f"hidden{idx}.norm"] = unit.norm
        named["head"] = self.head
        return named

    def init_optimizer(self, lr: float) -> None:
        for layer in self.layers().values():
            layer.init_optimizer(lr)

    def set_learning_rate(self, lr: float) -> None:
        for layer in self.layers().values():
            layer.set_learning_rate(lr)

    def set_training(self, training: bool) -> None:
        for unit in self.hidden:
            if unit.norm is not None:
                unit.norm.training = training

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, layer in self.layers().items():
            out.update(prefixed(name, layer.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, layer in self.layers().items():
            layer.load_state_dict(unprefixed(name, state))

    #####################################
    # Forward / Backward
    #####################################

    def _model_input(self, h: np.ndarray, cond: np.ndarray | None) -> np.ndarray:
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise_config_error(f"model expects input [batch x {self.input_dim}], got {h.shape}")
        if self.conditional and cond is None:
            raise_config_error("conditional model called without a label")
        if not self.conditional and cond is not None:
            raise_config_error("unconditional model called with a label")
        if cond is None:
            return h
        return np.concatenate([h, one_hot(cond, self.num_classes)], axis=1)

    def forward(self, h: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
        a = self._model_input(h, cond)
        caches: list[Any] = []
        for unit in self.hidden:
            a, lin_cache = linear_forward(unit.linear, a)
            norm_cache = None
            if unit.norm is not None:
                a, norm_cache = batchnorm_forward(unit.norm, a)
            a, mask = relu_forward(a)
            caches.append((lin_cache, norm_cache, mask))
        out, head_cache = linear_forward(self.head, a)
        caches.append(head_cache)
        self._caches = caches
        return out

    def backward(self, dout: np.ndarray) -> tuple[dict[str, dict[str, np.ndarray]], np.ndarray]:
        """Gradients per layer name plus the gradient w.r.t. h (label columns dropped)."""
        grads: dict[str, dict[str, np.ndarray]] = {}
        da, dW, db = linear_backward(self._caches[-1], dout)
        grads["head"] = {"W": dW, "b": db}
        for idx in reversed(range(len(self.hidden))):
            lin_cache, norm_cache, mask = self._caches[idx]
            da = relu_backward(mask, da)
            if norm_cache is not None:
                da, dgamma, dbeta = batchnorm_backward(norm_cache, da)
                grads[f"hidden{idx}.norm"] = {"gamma": dgamma, "beta": dbeta}
            da, dW, db = linear_backward(lin_cache, da)
            grads[f"hidden{idx}.linear"] = {"W": dW, "b": db}
        return grads, da[:, : self.input_dim]

    def apply_gradients(self, grads: dict[str, dict[str, np.ndarray]]) -> None:
        layers = self.layers()
        for name, layer_grads in grads.items():
            layers[name].apply_gradients(layer_grads)


class SgModel(AuxiliaryNet):
    """Synthetic gradient model M: h (+ label) -> predicted dL/dh."""

    @classmethod
    def for_lstm(
        cls,
        rng: np.random.Generator,
        units: int,
        hidden_layers: int = 1,
        batchnorm: bool = False,
        lr: float = 7e-5,
    ) -> "SgModel":
        """Reads h_t (U) and predicts [dh; dc] (2U)."""
        return cls.create(
            rng,
            input_dim=units,
            output_dim=2 * units,
            hidden_layers=hidden_layers,
            hidden_width=units,
            batchnorm=batchnorm,
            lr=lr,
        )


class SyntheticInputModel(AuxiliaryNet):
    """Synthetic input model I: raw input x -> predicted activation h."""


#####################################
# Helper Functions
#####################################


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels >= num_classes):
        raise_config_error(f"labels must be class indices in [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def regression(
    model: AuxiliaryNet, x: np.ndarray, cond: np.ndarray | None, target: np.ndarray
) -> tuple[float, dict[str, dict[str, np.ndarray]], np.ndarray]:
    """
    L2 regression of the model output onto a constant target.

    Returns (loss, parameter grads, dL/dx). Nothing is applied.
    """
    target = detach(target)
    pred = model.forward(x, cond)
    loss, dpred = l2_loss(pred, target)
    grads, dx = model.backward(dpred)
    return loss, grads, dx


#####################################
# Synthetic Gradient Operations
#####################################


def sg_predict(model: SgModel, h: np.ndarray, cond: np.ndarray | None = None) -> np.ndarray:
    """delta_hat = M(h, c); caches are kept on the model."""
    out = model.forward(h, cond)
    check_finite("synthetic gradient", out)
    return out


def sg_regression(
    model: SgModel, h: np.ndarray, cond: np.ndarray | None, target: np.ndarray
) -> tuple[float, dict[str, dict[str, np.ndarray]], np.ndarray]:
    return regression(model, h, cond, target)


def sg_update(
    model: SgModel, h: np.ndarray, cond: np.ndarray | None, target: np.ndarray
) -> float:
    """One Adam step of M toward target; returns the pre-step loss."""
    loss, grads, _ = regression(model, h, cond, target)
    model.apply_gradients(grads)
    return loss


#####################################
# Synthetic Input Operations
#####################################


def synth_input_predict(
    model: SyntheticInputModel, x: np.ndarray, cond: np.ndarray | None = None
) -> np.ndarray:
    out = model.forward(x, cond)
    check_finite("synthetic input", out)
    return out


def synth_input_update(
    model: SyntheticInputModel, x: np.ndarray, cond: np.ndarray | None, target_h: np.ndarray
) -> float:
    """One Adam step of I toward the true activation; returns the pre-step loss."""
    loss, grads, _ = regression(model, x, cond, target_h)
    model.apply_gradients(grads)
    return loss
