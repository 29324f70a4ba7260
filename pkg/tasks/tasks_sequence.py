"""
tasks_sequence.py - Copy and Repeat Copy episodes, bits error and curriculum.

Copy (N symbols of `width` random bits):
    step 0          start marker
    steps 1..N      the symbols
    step N+1        stop marker
    steps N+2..2N+1 the model must replay the symbols (masked targets)

Repeat Copy adds a repeat-count channel on the stop step carrying
R / repeat_scale, replays the symbols R times and finishes with one step
whose target is the end-marker channel.

T_task (the time dependency reported by the curriculum) is N + 3 for Copy
and N * R + 3 for Repeat Copy.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
from dataclasses import dataclass, replace

# Import external packages
import numpy as np

# Import functions from local modules
from utils.utils_config import raise_config_error
from utils.utils_logger import logger
from utils.utils_numerics import DTYPE

#####################################
# Default Configurations
#####################################

DEFAULT_WIDTH = 8
DEFAULT_REPEAT_SCALE = 10.0
BITS_THRESHOLD = 0.15
PROB_CLAMP = 1e-12

TASK_COPY = "copy"
TASK_REPEAT_COPY = "repeat_copy"

#####################################
# Episodes
#####################################


@dataclass(frozen=True)
class Episode:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    t_task: int
    n: int
    r: int = 1

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def copy_dims(width: int = DEFAULT_WIDTH) -> tuple[int, int]:
    """(input channels, target channels) for Copy."""
    return width + 2, width


def repeat_copy_dims(width: int = DEFAULT_WIDTH) -> tuple[int, int]:
    """(input channels, target channels) for Repeat Copy."""
    return width + 3, width + 1


def task_dims(kind: str, width: int = DEFAULT_WIDTH) -> tuple[int, int]:
    if kind == TASK_COPY:
        return copy_dims(width)
    if kind == TASK_REPEAT_COPY:
        return repeat_copy_dims(width)
    raise_config_error(f"Unknown sequence task: {kind}")


def copy_t_task(n: int) -> int:
    return n + 3


def repeat_copy_t_task(n: int, r: int) -> int:
    return n * r + 3


def gen_copy(n: int, rng: np.random.Generator, width: int = DEFAULT_WIDTH) -> Episode:
    """Copy episode of 2N+2 steps."""
    if n < 1:
        raise_config_error(f"Copy needs N >= 1, got {n}")
    symbols = rng.integers(0, 2, size=(n, width)).astype(DTYPE)
    in_dim, out_dim = copy_dims(width)
    steps = 2 * n + 2
    inputs = np.zeros((steps, in_dim), dtype=DTYPE)
    targets = np.zeros((steps, out_dim), dtype=DTYPE)
    mask = np.zeros(steps, dtype=DTYPE)
    inputs[0, width] = 1.0
    inputs[1 : n + 1, :width] = symbols
    inputs[n + 1, width + 1] = 1.0
    targets[n + 2 :] = symbols
    mask[n + 2 :] = 1.0
    return Episode(inputs=inputs, targets=targets, mask=mask, t_task=copy_t_task(n), n=n)


def gen_repeat_copy(
    n: int,
    r: int,
    rng: np.random.Generator,
    width: int = DEFAULT_WIDTH,
    repeat_scale: float = DEFAULT_REPEAT_SCALE,
) -> Episode:
    """Repeat Copy episode of N*R + N + 3 steps."""
    if n < 1 or r < 1:
        raise_config_error(f"Repeat Copy needs N, R >= 1, got N={n}, R={r}")
    symbols = rng.integers(0, 2, size=(n, width)).astype(DTYPE)
    in_dim, out_dim = repeat_copy_dims(width)
    steps = n * r + n + 3
    inputs = np.zeros((steps, in_dim), dtype=DTYPE)
    targets = np.zeros((steps, out_dim), dtype=DTYPE)
    mask = np.zeros(steps, dtype=DTYPE)
    inputs[0, width] = 1.0
    inputs[1 : n + 1, :width] = symbols
    inputs[n + 1, width + 1] = 1.0
    inputs[n + 1, width + 2] = r / repeat_scale
    start = n + 2
    targets[start : start + n * r, :width] = np.tile(symbols, (r, 1))
    targets[-1, width] = 1.0
    mask[start:] = 1.0
    return Episode(
        inputs=inputs, targets=targets, mask=mask, t_task=repeat_copy_t_task(n, r), n=n, r=r
    )


def gen_episode(kind: str, n: int, r: int, rng: np.random.Generator, width: int = DEFAULT_WIDTH) -> Episode:
    if kind == TASK_COPY:
        return gen_copy(n, rng, width)
    if kind == TASK_REPEAT_COPY:
        return gen_repeat_copy(n, r, rng, width)
    raise_config_error(f"Unknown sequence task: {kind}")


#####################################
# Bits Error
#####################################


def bits_error(predictions: np.ndarray, episode: Episode) -> float:
    """
    Masked binary cross-entropy in bits, summed over the episode.

    predictions are per-channel probabilities with the episode's target
    shape; unmasked steps are ignored.
    """
    if predictions.shape != episode.targets.shape:
        raise_config_error(
            f"predictions {predictions.shape} do not match targets {episode.targets.shape}"
        )
    p = np.clip(predictions, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = episode.targets
    per_unit = -(t * np.log2(p) + (1.0 - t) * np.log2(1.0 - p))
    return float((per_unit.sum(axis=1) * episode.mask).sum())


#####################################
# Curriculum
#####################################


@dataclass(frozen=True)
class CurriculumState:
    kind: str = TASK_COPY
    n: int = 1
    r: int = 1
    threshold: float = BITS_THRESHOLD
    solved: tuple[int, ...] = ()
    next_increment: str = "n"

    @property
    def t_task(self) -> int:
        if self.kind == TASK_REPEAT_COPY:
            return repeat_copy_t_task(self.n, self.r)
        return copy_t_task(self.n)

    @property
    def max_solved(self) -> int:
        return max(self.solved) if self.solved else 0


def curriculum_advance(state: CurriculumState, recent_bits: float) -> CurriculumState:
    """
    Make the task harder once recent_bits falls below the threshold.

    Copy increments N; Repeat Copy alternates N, R, N, R, ...
    """
    if recent_bits >= state.threshold:
        return state
    solved = state.solved + (state.t_task,)
    if state.kind == TASK_REPEAT_COPY:
        if state.next_increment == "n":
            new_state = replace(state, n=state.n + 1, solved=solved, next_increment="r")
        else:
            new_state = replace(state, r=state.r + 1, solved=solved, next_increment="n")
    else:
        new_state = replace(state, n=state.n + 1, solved=solved)
    logger.info(
        f"Curriculum solved T_task={state.t_task} ({recent_bits:.4f} bits); "
        f"now N={new_state.n}, R={new_state.r}"
    )
    return new_state


#####################################
# Continuous Lanes
#####################################


class EpisodeLanes:
    """
    `batch` independent lanes, each playing episodes back to back so the
    recurrent state flows across episode boundaries. New episodes use the
    level (N, R) current at the moment they start.
    """

    def __init__(
        self,
        kind: str,
        batch: int,
        rng: np.random.Generator,
        width: int = DEFAULT_WIDTH,
        n: int = 1,
        r: int = 1,
    ):
        self.kind = kind
        self.batch = batch
        self.rng = rng
        self.width = width
        self.in_dim, self.out_dim = task_dims(kind, width)
        self.level = (n, r)
        self.episodes = [self._fresh() for _ in range(batch)]
        self.positions = [0] * batch
        self.buffers: list[list[np.ndarray]] = [[] for _ in range(batch)]
        self._served: list[list[tuple[Episode, int]]] = [[] for _ in range(batch)]
        self.completed = 0

    def _fresh(self) -> Episode:
        n, r = self.level
        return gen_episode(self.kind, n, r, self.rng, self.width)

    def set_level(self, n: int, r: int) -> None:
        self.level = (n, r)

    def next_window(self, steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return inputs [T x B x in], targets [T x B x out] and mask [T x B]."""
        xs = np.zeros((steps, self.batch, self.in_dim), dtype=DTYPE)
        ys = np.zeros((steps, self.batch, self.out_dim), dtype=DTYPE)
        masks = np.zeros((steps, self.batch), dtype=DTYPE)
        self._served = [[] for _ in range(self.batch)]
        for lane in range(self.batch):
            for t in range(steps):
                if self.positions[lane] == self.episodes[lane].steps:
                    self.episodes[lane] = self._fresh()
                    self.positions[lane] = 0
                episode, step = self.episodes[lane], self.positions[lane]
                xs[t, lane] = episode.inputs[step]
                ys[t, lane] = episode.targets[step]
                masks[t, lane] = episode.mask[step]
                self._served[lane].append((episode, step))
                self.positions[lane] += 1
        return xs, ys, masks

    def record(self, probabilities: np.ndarray) -> list[tuple[Episode, float]]:
        """Attach the learner's outputs to the last window; return finished episodes with their bits."""
        finished = []
        for lane, served in enumerate(self._served):
            for t, (episode, step) in enumerate(served):
                if step == 0:
                    self.buffers[lane] = []
                self.buffers[lane].append(probabilities[t, lane])
                if step == episode.steps - 1:
                    finished.append((episode, bits_error(np.stack(self.buffers[lane]), episode)))
                    self.buffers[lane] = []
        self._served = [[] for _ in range(self.batch)]
        self.completed += len(finished)
        return finished

    def state_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {
            "level": np.array(self.level, dtype=np.int64),
            "positions": np.array(self.positions, dtype=np.int64),
            "completed": np.array([self.completed], dtype=np.int64),
        }
        for lane, episode in enumerate(self.episodes):
            out[f"lane{lane}.inputs"] = episode.inputs
            out[f"lane{lane}.targets"] = episode.targets
            out[f"lane{lane}.mask"] = episode.mask
            out[f"lane{lane}.shape"] = np.array([episode.t_task, episode.n, episode.r], dtype=np.int64)
            out[f"lane{lane}.buffer"] = (
                np.stack(self.buffers[lane])
                if self.buffers[lane]
                else np.zeros((0, self.out_dim), dtype=DTYPE)
            )
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        n, r = (int(v) for v in state["level"])
        self.level = (n, r)
        self.positions = [int(v) for v in state["positions"]]
        self.completed = int(state["completed"][0])
        for lane in range(self.batch):
            t_task, ep_n, ep_r = (int(v) for v in state[f"lane{lane}.shape"])
            self.episodes[lane] = Episode(
                inputs=np.array(state[f"lane{lane}.inputs"], dtype=DTYPE),
                targets=np.array(state[f"lane{lane}.targets"], dtype=DTYPE),
                mask=np.array(state[f"lane{lane}.mask"], dtype=DTYPE),
                t_task=t_task,
                n=ep_n,
                r=ep_r,
            )
            self.buffers[lane] = list(np.array(state[f"lane{lane}.buffer"], dtype=DTYPE))
