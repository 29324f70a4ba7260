"""
bp_lambda.py - recursive mixing of backpropagated and synthetic gradients.

At interface k the mixed gradient is

    g_bar_k = lam_k * g_bar_{k+1} dh_{k+1}/dh_k + (1 - lam_k) * g_k

where g_k is the synthetic gradient at k. lam = 1 everywhere recovers
backprop, lam = 0 everywhere is pure synthetic feedback. The recurrent
variant adds the immediate per-step loss gradient dl_k/dh_k.

jvp_back callables apply one layer's backward pass to a gradient arriving
from above; the folds below call each of them exactly once, even where
lambda_k = 0, so callers can collect parameter gradients as a side effect.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass
from typing import Callable, Sequence

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_logger import logger
from utils.utils_numerics import detach, raise_dimension_error

JvpBack = Callable[[np.ndarray], np.ndarray]

#####################################
# Errors and Types
#####################################


class LambdaRangeError(ValueError):
    """Raised when a mixing weight lies outside [0, 1]."""


def check_lambda(lam: float) -> float:
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        msg = f"lambda must lie in [0, 1], got {lam}"
        logger.error(msg)
        raise LambdaRangeError(msg)
    return lam


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-position weights, or a rule k -> lambda_k for unbounded sequences."""

    values: tuple[float, ...] | None = None
    period: int | None = None

    def __post_init__(self) -> None:
        if self.values is not None:
            for lam in self.values:
                check_lambda(lam)
        if self.period is not None and self.period < 1:
            raise LambdaRangeError(f"period must be >= 1, got {self.period}")

    @classmethod
    def constant(cls, lam: float, positions: int) -> "LambdaSchedule":
        return cls(values=tuple([check_lambda(lam)] * positions))

    @classmethod
    def truncation(cls, period: int) -> "LambdaSchedule":
        """lambda_k = 0 iff k mod period == 0, else 1."""
        return cls(period=period)

    def __call__(self, k: int) -> float:
        if self.values is not None:
            return self.values[k]
        if self.period is not None:
            return 0.0 if k % self.period == 0 else 1.0
        return 1.0


@dataclass
class MixState:
    gradient: np.ndarray
    position: int


#####################################
# Estimator Operations
#####################################


def mix_step(
    g_next: np.ndarray | None,
    jvp_back: JvpBack | None,
    g_synth: np.ndarray | None,
    lam: float,
) -> np.ndarray:
    """
    g_bar_k = lam * jvp_back(g_next) + (1 - lam) * g_synth.

    lam == 1 returns the backpropagated term untouched and lam == 0 returns
    the synthetic term without running the backward pass.
    """
    lam = check_lambda(lam)
    if lam == 0.0:
        if g_synth is None:
            raise_dimension_error("lambda = 0 needs a synthetic gradient")
        return g_synth
    if g_next is None or jvp_back is None:
        raise_dimension_error("lambda > 0 needs a gradient from above and its backward pass")
    back = jvp_back(g_next)
    if lam == 1.0:
        return back
    if g_synth is None or g_synth.shape != back.shape:
        raise_dimension_error(
            f"synthetic gradient shape {None if g_synth is None else g_synth.shape} "
            f"does not match backpropagated {back.shape}"
        )
    return lam * back + (1.0 - lam) * g_synth


def recurrent_mix_step(
    dl_k: np.ndarray,
    g_next: np.ndarray | None,
    jvp_back: JvpBack | None,
    g_synth: np.ndarray | None,
    lam: float,
) -> np.ndarray:
    """g_bar_k = dl_k/dh_k + lam * g_bar_{k+1} dh_{k+1}/dh_k + (1 - lam) * g_k."""
    lam = check_lambda(lam)
    if g_next is None and lam > 0.0:
        # end of the sequence: nothing arrives from above
        mixed = (1.0 - lam) * g_synth if g_synth is not None else np.zeros_like(dl_k)
        return dl_k + mixed
    return dl_k + mix_step(g_next, jvp_back, g_synth, lam)


def unrolled_target(g_next: np.ndarray, jvp_back: JvpBack) -> np.ndarray:
    """z_bar_k = g_bar_{k+1} dh_{k+1}/dh_k, detached for use as a regression target."""
    return detach(jvp_back(g_next))


def geometric_weights(lambdas: Sequence[float]) -> np.ndarray:
    """
    Weights c^n of the n-step estimators implied by lambda_k..lambda_{K-1}.

    c^n = (1 - lambda_n) * prod_{j<n} lambda_j for n < K and the final
    weight is whatever is left, so the result lies on the simplex.
    """
    lams = [check_lambda(lam) for lam in lambdas]
    weights = np.zeros(len(lams) + 1)
    carry = 1.0
    for n, lam in enumerate(lams):
        weights[n] = (1.0 - lam) * carry
        carry *= lam
    weights[-1] = max(0.0, 1.0 - weights[:-1].sum())
    return weights


#####################################
# Folds
#####################################


def fold_chain(
    top_gradient: np.ndarray,
    jvps: Sequence[JvpBack],
    synthetic: Sequence[np.ndarray | None],
    schedule: LambdaSchedule,
) -> list[MixState]:
    """
    Fold the mixing recursion down a feed-forward chain.

    top_gradient is the true gradient at the last interface K-1 (from the
    loss). jvps[k] maps a gradient at interface k+1 to interface k, and
    synthetic[k] is g_k. Returns MixState for k = K-1 .. 0, top first.
    """
    positions = len(jvps) + 1
    if len(synthetic) != positions - 1:
        raise_dimension_error(f"expected {positions - 1} synthetic gradients, got {len(synthetic)}")
    states = [MixState(gradient=top_gradient, position=positions - 1)]
    g = top_gradient
    for k in reversed(range(positions - 1)):
        # every backward pass runs so callers collect all parameter gradients
        back = jvps[k](g)
        g = mix_step(back, _identity, synthetic[k], schedule(k))
        states.append(MixState(gradient=g, position=k))
    return states


def fold_recurrent(
    step_losses: Sequence[np.ndarray],
    jvps: Sequence[JvpBack],
    synthetic: Sequence[np.ndarray | None],
    schedule: LambdaSchedule,
) -> list[MixState]:
    """
    Fold the recurrent recursion over positions k = 1..K.

    step_losses[k-1] is dl_k/dh_k, jvps[k-1] maps a gradient at h_k to
    h_{k-1} (the backward pass of step k), synthetic[k-1] is g_k.
    Returns MixState for k = K .. 1, last position first, plus the
    gradient carried to h_0 as position 0.
    """
    count = len(step_losses)
    states: list[MixState] = []
    g_next: np.ndarray | None = None
    for k in range(count, 0, -1):
        back = jvps[k](g_next) if k < count else None
        g_next = recurrent_mix_step(step_losses[k - 1], back, _identity, synthetic[k - 1], schedule(k))
        states.append(MixState(gradient=g_next, position=k))
    states.append(MixState(gradient=jvps[0](g_next), position=0))
    return states


def _identity(g: np.ndarray) -> np.ndarray:
    return g
