"""
experiments.py - runs one configured experiment end to end, or a sweep.

A run owns a single Philox generator seeded from the config; every random
draw (initialisation, batches, update decisions, episodes) comes from it,
so a config and seed pin the whole metrics file down to the byte.

Output directory layout:
    config.env        the resolved config
    metrics.csv       one row every LOG_EVERY steps (and on the last step)
    checkpoint.ckpt   written every CHECKPOINT_EVERY steps and at the end
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import itertools
import pathlib
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Protocol

# Import external packages
import numpy as np
import pandas as pd

# Import functions from local modules
from harness.experiment_config import (
    FF_KINDS,
    ExperimentConfig,
    clone,
    save_experiment_config,
    with_overrides,
)
from tasks.tasks_chars import CharLanes, load_text
from tasks.tasks_mnist import IMAGE_SIZE, MnistDataset, load_mnist, synthetic_digits
from tasks.tasks_sequence import CurriculumState, EpisodeLanes, task_dims
from trainers.ff_dni import (
    FfNetwork,
    UpdateScheduler,
    backprop_step,
    bp_lambda_step,
    build_ff_network,
    evaluate,
    train_step,
)
from trainers.multi_net import TwoNetSystem, chance_error, draw_stream, evaluate_two_net, two_net_step
from trainers.rnn_dni import (
    OUTPUT_CATEGORICAL,
    CharLmRunner,
    CurriculumRunner,
    RnnDniTrainer,
)
from utils.utils_checkpoint import load_checkpoint, save_checkpoint
from utils.utils_config import flatten_dataclass, get_data_dir, raise_config_error
from utils.utils_logger import logger
from utils.utils_metrics import CsvMetricsSink, MetricsRecorder, MetricsRow, open_metrics_stream, truncate_metrics
from utils.utils_numerics import make_rng, prefixed, rng_state_from_json, rng_state_to_json, unprefixed

#####################################
# Default Configurations
#####################################

CONFIG_FILE = "config.env"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.ckpt"
MANIFEST_FILE = "manifest.csv"

SYNTHETIC_TRAIN_SIZE = 5000
DEFAULT_TEXT_PATH = pathlib.Path("data/text/corpus.txt")
TWO_NET_EVAL_PERIODS = 16

# Keys a resume may change without invalidating the checkpoint
RESUMABLE_CHANGES = {"BUDGET", "OUT_DIR", "LOG_EVERY", "EVAL_EVERY", "CHECKPOINT_EVERY"}

#####################################
# Helpers
#####################################


def scheduled_lr(base: float, step: int, budget: int) -> float:
    """Base rate, divided by 10 at 60% and again at 80% of the budget."""
    if budget <= 0 or step <= 0.6 * budget:
        return base
    if step <= 0.8 * budget:
        return base / 10.0
    return base / 100.0


def load_digits(config: ExperimentConfig, split: str) -> MnistDataset:
    if config.dataset == "synthetic":
        size = SYNTHETIC_TRAIN_SIZE if split == "train" else config.eval_size
        offset = 1 if split == "train" else 2
        return synthetic_digits(size, make_rng(config.seed + offset), prototype_seed=config.seed)
    data = load_mnist(get_data_dir(), split)
    if split == "test" and config.eval_size < len(data):
        data = MnistDataset(images=data.images[: config.eval_size], labels=data.labels[: config.eval_size])
    return data


class PeriodMeans:
    """Running means of per-step metrics between two logged rows."""

    def __init__(self) -> None:
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, values: dict[str, float]) -> None:
        for key, value in values.items():
            self.sums[key] = self.sums.get(key, 0.0) + float(value)
            self.counts[key] = self.counts.get(key, 0) + 1

    def flush(self) -> dict[str, float]:
        out = {key: self.sums[key] / self.counts[key] for key in self.sums}
        self.sums, self.counts = {}, {}
        return out


#####################################
# Experiment Kinds
#####################################


class Experiment(Protocol):
    columns: list[str]

    def finished(self, step: int) -> bool: ...

    def samples(self, step: int) -> int: ...

    def train(self, step: int) -> dict[str, float]: ...

    def snapshot(self) -> dict[str, float]: ...

    def evaluate(self) -> dict[str, float]: ...

    def state_dict(self) -> dict[str, np.ndarray]: ...

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None: ...

    def meta(self) -> dict[str, Any]: ...

    def load_meta(self, meta: dict[str, Any]) -> None: ...


def _ff_columns(config: ExperimentConfig) -> list[str]:
    n = config.ff.n_layers
    columns = ["task_loss", "layers_updated", "lr"]
    columns += [f"sg_loss_{i}" for i in range(1, n)]
    if config.ff.trainer == "complete_unlock":
        columns += [f"input_loss_{i}" for i in range(2, n + 1)]
    if config.ff.diagnostics:
        for i in range(1, n):
            columns += [f"grad_l2_{i}", f"grad_cos_{i}", f"grad_sign_err_{i}"]
    return columns + ["test_error"]


class FeedForwardExperiment:
    def __init__(self, config: ExperimentConfig, rng: np.random.Generator):
        if config.ff.input_dim != IMAGE_SIZE:
            raise_config_error(f"digit experiments need FF_INPUT_DIM={IMAGE_SIZE}, got {config.ff.input_dim}")
        self.config = config
        self.rng = rng
        self.train_set = load_digits(config, "train")
        self.test_set = load_digits(config, "test")
        self.net: FfNetwork = build_ff_network(config.ff, rng)
        self.scheduler = UpdateScheduler(p_update=config.ff.p_update, rng=rng)
        self.lr = config.ff.lr
        self.columns = _ff_columns(config)

    def finished(self, step: int) -> bool:
        return step >= self.config.budget

    def samples(self, step: int) -> int:
        return step * self.config.ff.batch_size

    def _update_lr(self, step: int) -> None:
        if not self.config.lr_schedule:
            return
        lr = scheduled_lr(self.config.ff.lr, step, self.config.budget)
        if lr != self.lr:
            logger.info(f"step {step}: learning rate {self.lr:g} -> {lr:g}")
            self.net.set_learning_rate(lr)
            self.lr = lr

    def train(self, step: int) -> dict[str, float]:
        self._update_lr(step)
        x, y = self.train_set.sample(self.rng, self.config.ff.batch_size)
        report = train_step(self.net, x, y, self.scheduler)
        return report.metrics()

    def snapshot(self) -> dict[str, float]:
        return {"lr": self.lr}

    def evaluate(self) -> dict[str, float]:
        return {"test_error": evaluate(self.net, self.test_set.images, self.test_set.labels)}

    def state_dict(self) -> dict[str, np.ndarray]:
        return prefixed("net", self.net.state_dict())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.net.load_state_dict(unprefixed("net", state))

    def meta(self) -> dict[str, Any]:
        return {"lr": self.lr}

    def load_meta(self, meta: dict[str, Any]) -> None:
        self.lr = float(meta["lr"])
        self.net.set_learning_rate(self.lr)


class BpLambdaCheckExperiment(FeedForwardExperiment):
    """BP(lambda) training next to a plain backprop twin started from the same weights."""

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator):
        super().__init__(config, rng)
        reference_spec = clone(config).ff
        reference_spec.trainer = "backprop"
        self.reference = build_ff_network(reference_spec, make_rng(config.seed))
        self.net = build_ff_network(config.ff, make_rng(config.seed))
        self.columns = ["task_loss", "reference_loss", "max_param_divergence", "lr"]
        self.columns += [f"sg_loss_{i}" for i in range(1, config.ff.n_layers)]
        self.columns += ["test_error", "reference_test_error"]

    def _update_lr(self, step: int) -> None:
        previous = self.lr
        super()._update_lr(step)
        if self.lr != previous:
            self.reference.set_learning_rate(self.lr)

    def train(self, step: int) -> dict[str, float]:
        self._update_lr(step)
        x, y = self.train_set.sample(self.rng, self.config.ff.batch_size)
        report = bp_lambda_step(self.net, x, y)
        reference = backprop_step(self.reference, x, y)
        ours, theirs = self.net.trunk_parameters(), self.reference.trunk_parameters()
        divergence = max(float(np.max(np.abs(ours[k] - theirs[k]))) for k in ours)
        out = {"task_loss": report.task_loss, "reference_loss": reference.task_loss}
        out["max_param_divergence"] = divergence
        out.update({f"sg_loss_{i}": loss for i, loss in report.sg_losses.items()})
        return out

    def evaluate(self) -> dict[str, float]:
        out = super().evaluate()
        out["reference_test_error"] = evaluate(self.reference, self.test_set.images, self.test_set.labels)
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        out = super().state_dict()
        out.update(prefixed("reference", self.reference.state_dict()))
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        super().load_state_dict(state)
        self.reference.load_state_dict(unprefixed("reference", state))

    def load_meta(self, meta: dict[str, Any]) -> None:
        super().load_meta(meta)
        self.reference.set_learning_rate(self.lr)


class CurriculumExperiment:
    """Copy / Repeat Copy with continuous lanes; the budget counts episodes."""

    columns = [
        "task_loss",
        "sg_loss",
        "aux_loss",
        "recent_bits",
        "level_n",
        "level_r",
        "t_task",
        "max_t_task_solved",
    ]

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator):
        self.config = config
        tbptt = config.tbptt
        in_dim, out_dim = task_dims(tbptt.task, tbptt.width)
        self.trainer = RnnDniTrainer(tbptt, in_dim, out_dim, rng)
        self.lanes = EpisodeLanes(tbptt.task, tbptt.batch, rng, tbptt.width)
        self.runner = CurriculumRunner(learner=self.trainer, lanes=self.lanes, config=tbptt)

    def finished(self, step: int) -> bool:
        return self.lanes.completed >= self.config.budget

    def samples(self, step: int) -> int:
        return self.lanes.completed

    def train(self, step: int) -> dict[str, float]:
        outcome = self.runner.advance_window()
        return outcome.report.metrics()

    def snapshot(self) -> dict[str, float]:
        state = self.runner.state
        return {
            "recent_bits": self.runner.recent_bits,
            "level_n": float(state.n),
            "level_r": float(state.r),
            "t_task": float(state.t_task),
            "max_t_task_solved": float(state.max_solved),
        }

    def evaluate(self) -> dict[str, float]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = prefixed("trainer", self.trainer.state_dict())
        out.update(prefixed("lanes", self.lanes.state_dict()))
        out["recent"] = np.array(self.runner.recent, dtype=np.float64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.trainer.load_state_dict(unprefixed("trainer", state))
        self.lanes.load_state_dict(unprefixed("lanes", state))
        self.runner.recent.clear()
        self.runner.recent.extend(float(v) for v in state["recent"])

    def meta(self) -> dict[str, Any]:
        state = self.runner.state
        return {
            "curriculum": {
                "n": state.n,
                "r": state.r,
                "solved": list(state.solved),
                "next_increment": state.next_increment,
            },
            "trace": [list(point) for point in self.runner.trace],
        }

    def load_meta(self, meta: dict[str, Any]) -> None:
        saved = meta["curriculum"]
        self.runner.state = CurriculumState(
            kind=self.lanes.kind,
            n=int(saved["n"]),
            r=int(saved["r"]),
            threshold=self.config.tbptt.threshold,
            solved=tuple(int(v) for v in saved["solved"]),
            next_increment=saved["next_increment"],
        )
        self.runner.trace = [(int(a), int(b)) for a, b in meta["trace"]]

    @property
    def trace(self) -> list[tuple[int, int]]:
        return self.runner.trace


class CharExperiment:
    """Character-level language modelling; the budget counts windows."""

    columns = ["task_loss", "bpc", "sg_loss", "aux_loss"]

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator):
        self.config = config
        tbptt = config.tbptt
        text = load_text(pathlib.Path(tbptt.text_path) if tbptt.text_path else DEFAULT_TEXT_PATH)
        self.lanes = CharLanes(text, tbptt.batch)
        trainer = RnnDniTrainer(tbptt, self.lanes.vocab_size, self.lanes.vocab_size, rng, OUTPUT_CATEGORICAL)
        self.runner = CharLmRunner(trainer=trainer, lanes=self.lanes)

    def finished(self, step: int) -> bool:
        return step >= self.config.budget

    def samples(self, step: int) -> int:
        return step * self.config.tbptt.T * self.config.tbptt.batch

    def train(self, step: int) -> dict[str, float]:
        report, bpc = self.runner.advance_window()
        out = report.metrics()
        out["bpc"] = bpc
        return out

    def snapshot(self) -> dict[str, float]:
        return {}

    def evaluate(self) -> dict[str, float]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = prefixed("trainer", self.runner.trainer.state_dict())
        out["lanes.position"] = np.array([self.lanes.position], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.runner.trainer.load_state_dict(unprefixed("trainer", state))
        self.lanes.position = int(state["lanes.position"][0])

    def meta(self) -> dict[str, Any]:
        return {}

    def load_meta(self, meta: dict[str, Any]) -> None:
        pass


class TwoNetExperiment:
    """Networks A and B on a digit stream; the budget counts B-periods."""

    columns = [
        "loss_a",
        "error_a",
        "loss_b",
        "error_b",
        "sg_loss",
        "a_updates",
        "b_updates",
        "eval_error_a",
        "eval_error_b",
        "chance_error_b",
    ]

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        two_net = config.two_net
        self.train_set = load_digits(config, "train")
        test_set = load_digits(config, "test")
        self.system = TwoNetSystem.create(two_net, rng)
        period = two_net.T * two_net.T
        self.eval_images, self.eval_digits = draw_stream(
            test_set, make_rng(config.seed + 3), TWO_NET_EVAL_PERIODS * period, two_net.batch
        )
        p_three = float(np.mean(self.train_set.labels == 3))
        self.chance = chance_error(two_net.T, p_three)

    def finished(self, step: int) -> bool:
        return step >= self.config.budget

    def samples(self, step: int) -> int:
        return step * self.config.two_net.T**2 * self.config.two_net.batch

    def train(self, step: int) -> dict[str, float]:
        two_net = self.config.two_net
        images, digits = draw_stream(self.train_set, self.rng, two_net.T * two_net.T, two_net.batch)
        return two_net_step(self.system, images, digits).metrics()

    def snapshot(self) -> dict[str, float]:
        return {
            "a_updates": float(self.system.a_updates),
            "b_updates": float(self.system.b_updates),
            "chance_error_b": self.chance,
        }

    def evaluate(self) -> dict[str, float]:
        err_a, err_b = evaluate_two_net(self.system, self.eval_images, self.eval_digits)
        return {"eval_error_a": err_a, "eval_error_b": err_b}

    def state_dict(self) -> dict[str, np.ndarray]:
        return prefixed("system", self.system.state_dict())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.system.load_state_dict(unprefixed("system", state))

    def meta(self) -> dict[str, Any]:
        return {}

    def load_meta(self, meta: dict[str, Any]) -> None:
        pass


def build_experiment(config: ExperimentConfig, rng: np.random.Generator) -> Experiment:
    if config.kind == "bp-lambda-check":
        return BpLambdaCheckExperiment(config, rng)
    if config.kind in FF_KINDS:
        return FeedForwardExperiment(config, rng)
    if config.kind in ("rnn-copy", "rnn-repeat"):
        return CurriculumExperiment(config, rng)
    if config.kind == "rnn-chars":
        return CharExperiment(config, rng)
    return TwoNetExperiment(config, rng)


#####################################
# Running
#####################################


def _checkpoint(path: pathlib.Path, config: ExperimentConfig, experiment: Experiment, rng, step: int) -> None:
    meta = {
        "kind": config.kind,
        "step": step,
        "samples": experiment.samples(step),
        "config": flatten_dataclass(config),
        "rng": rng_state_to_json(rng),
        "experiment": experiment.meta(),
    }
    save_checkpoint(path, meta, experiment.state_dict())


def _restore(
    path: pathlib.Path, config: ExperimentConfig, experiment: Experiment, rng: np.random.Generator
) -> int:
    ckpt = load_checkpoint(path)
    saved = ckpt.meta.get("config", {})
    current = flatten_dataclass(config)
    changed = sorted(k for k in set(saved) | set(current) if saved.get(k) != current.get(k))
    blocking = [k for k in changed if k not in RESUMABLE_CHANGES]
    if blocking:
        raise_config_error(f"checkpoint {path} was written with a different config: {', '.join(blocking)}")
    experiment.load_state_dict(ckpt.arrays)
    experiment.load_meta(ckpt.meta.get("experiment", {}))
    rng.bit_generator.state = rng_state_from_json(ckpt.meta["rng"]).bit_generator.state
    step = int(ckpt.meta["step"])
    logger.info(f"Resumed {config.kind} from {path} at step {step}")
    return step


def run(config: ExperimentConfig, resume: pathlib.Path | None = None) -> pathlib.Path:
    """Run (or resume) one experiment; returns the metrics file path."""
    config.validate()
    out_dir = pathlib.Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_experiment_config(config, out_dir.joinpath(CONFIG_FILE))
    metrics_path = out_dir.joinpath(METRICS_FILE)
    checkpoint_path = out_dir.joinpath(CHECKPOINT_FILE)

    rng = make_rng(config.seed)
    experiment = build_experiment(config, rng)
    step = 0
    if resume is not None:
        step = _restore(pathlib.Path(resume), config, experiment, rng)
        if metrics_path.exists():
            truncate_metrics(metrics_path, step)
    logger.info(f"Running {config.kind} (seed {config.seed}, budget {config.budget}) into {out_dir}")

    sink = CsvMetricsSink(metrics_path, experiment.columns, append=resume is not None)
    means = PeriodMeans()
    with MetricsRecorder(sink, open_metrics_stream(config.run_name)) as recorder:
        while not experiment.finished(step):
            step += 1
            means.add(experiment.train(step))
            last = experiment.finished(step)
            if step % config.log_every and not last:
                continue
            values = means.flush()
            values.update(experiment.snapshot())
            if step % config.eval_every == 0 or last:
                values.update(experiment.evaluate())
            recorder.record(MetricsRow(step=step, samples=experiment.samples(step), values=values))
            if config.checkpoint_every and step % config.checkpoint_every == 0 and not last:
                _checkpoint(checkpoint_path, config, experiment, rng, step)
    _checkpoint(checkpoint_path, config, experiment, rng, step)
    logger.info(f"Finished {config.kind} at step {step} ({experiment.samples(step)} samples)")
    return metrics_path


#####################################
# Sweeps
#####################################


def parse_grid(items: list[str]) -> dict[str, list[str]]:
    """Parse `KEY=v1,v2,...` items."""
    grid: dict[str, list[str]] = {}
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise_config_error(f"grid item must look like KEY=v1,v2: {item}")
        grid[key.strip().upper()] = [v.strip() for v in values.split(",")]
    return grid


def parse_random(items: list[str], rng: np.random.Generator) -> dict[str, list[str]]:
    """Parse `KEY=low:high:count` items into `count` uniform draws."""
    grid: dict[str, list[str]] = {}
    for item in items:
        key, sep, spec = item.partition("=")
        parts = spec.split(":")
        if not sep or len(parts) != 3:
            raise_config_error(f"random item must look like KEY=low:high:count: {item}")
        low, high, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1 or high < low:
            raise_config_error(f"bad random range in {item}")
        grid[key.strip().upper()] = [repr(float(v)) for v in rng.uniform(low, high, size=count)]
    return grid


def sweep_points(template: ExperimentConfig, grid: dict[str, list[str]]) -> list[ExperimentConfig]:
    """Cartesian product of the grid; point i gets seed template.seed + i."""
    keys = sorted(grid)
    root = pathlib.Path(template.out_dir)
    points = []
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        overrides = dict(zip(keys, combo))
        overrides["SEED"] = str(template.seed + i)
        overrides["OUT_DIR"] = str(root.joinpath(f"run_{i:04d}"))
        config = with_overrides(template, overrides)
        config.validate()
        points.append(config)
    return points


def _run_point(values: dict[str, str]) -> str:
    config = with_overrides(ExperimentConfig(), values)
    try:
        run(config)
        return "ok"
    except Exception as e:
        logger.error(f"Sweep point {config.out_dir} failed: {e}")
        return f"failed: {e}"


def sweep(template: ExperimentConfig, grid: dict[str, list[str]], workers: int = 1) -> pd.DataFrame:
    """Run every grid point and write a manifest (one row per run) next to them."""
    points = sweep_points(template, grid)
    payloads = [flatten_dataclass(p) for p in points]
    logger.info(f"Sweep of {len(points)} runs with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            statuses = list(pool.map(_run_point, payloads))
    else:
        statuses = [_run_point(p) for p in payloads]
    keys = sorted(grid)
    rows = []
    for config, payload, status in zip(points, payloads, statuses):
        row = {"seed": config.seed, "out_dir": config.out_dir, "status": status}
        row.update({k: payload[k] for k in keys})
        rows.append(row)
    manifest = pd.DataFrame(rows, columns=["seed", "out_dir", *keys, "status"])
    root = pathlib.Path(template.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    manifest.to_csv(root.joinpath(MANIFEST_FILE), index=False)
    return manifest
