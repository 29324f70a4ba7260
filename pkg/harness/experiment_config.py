"""
experiment_config.py - the single config object behind every run.

Saved and loaded as a KEY=value file (see utils/utils_config.py). Section
prefixes: FF_ for the feed-forward network, TBPTT_ for the recurrent
trainer, TWO_NET_ for the two-network system.

Budget units depend on the kind:
    ff-*, bp-lambda-check   optimisation steps (batches)
    rnn-copy, rnn-repeat    episodes consumed
    rnn-chars               training windows
    multi-net               B-periods (chunks of T^2 A-ticks)
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import dataclasses
import pathlib
from dataclasses import dataclass, field

# Import functions from local modules
from tasks.tasks_sequence import TASK_COPY, TASK_REPEAT_COPY
from trainers.ff_dni import FfNetworkSpec
from trainers.multi_net import TwoNetConfig
from trainers.rnn_dni import TASK_CHARS, TbpttConfig
from utils.utils_config import (
    build_dataclass,
    flatten_dataclass,
    known_keys,
    load_config_file,
    raise_config_error,
    save_config_file,
)

#####################################
# Default Configurations
#####################################

FF_KINDS = ("ff-mnist", "ff-stochastic", "ff-unlock", "bp-lambda-check")
RNN_KINDS = ("rnn-copy", "rnn-repeat", "rnn-chars")
KINDS = FF_KINDS + RNN_KINDS + ("multi-net",)

TRAINERS_BY_KIND = {
    "ff-mnist": ("backprop", "dni", "stale_gradient", "bp_lambda"),
    "ff-stochastic": ("stochastic_dni", "stochastic_backprop"),
    "ff-unlock": ("complete_unlock",),
    "bp-lambda-check": ("bp_lambda",),
}

TASK_BY_KIND = {"rnn-copy": TASK_COPY, "rnn-repeat": TASK_REPEAT_COPY, "rnn-chars": TASK_CHARS}

DATASETS = ("mnist", "synthetic")

#####################################
# Experiment Config
#####################################


@dataclass
class ExperimentConfig:
    kind: str = "ff-mnist"
    seed: int = 0
    budget: int = 1000
    out_dir: str = "runs/default"
    dataset: str = "mnist"
    log_every: int = 100
    eval_every: int = 1000
    checkpoint_every: int = 0
    lr_schedule: bool = True
    eval_size: int = 10000
    ff: FfNetworkSpec = field(default_factory=FfNetworkSpec)
    tbptt: TbpttConfig = field(default_factory=TbpttConfig)
    two_net: TwoNetConfig = field(default_factory=TwoNetConfig)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise_config_error(f"kind must be one of {KINDS}, got {self.kind}")
        if self.budget < 0:
            raise_config_error(f"budget must be >= 0, got {self.budget}")
        if self.dataset not in DATASETS:
            raise_config_error(f"dataset must be one of {DATASETS}, got {self.dataset}")
        if self.log_every < 1 or self.eval_every < 1:
            raise_config_error("log_every and eval_every must be >= 1")
        if self.checkpoint_every < 0 or (self.checkpoint_every and self.checkpoint_every % self.log_every):
            raise_config_error(
                f"checkpoint_every ({self.checkpoint_every}) must be 0 or a multiple of log_every ({self.log_every})"
            )
        if self.kind in FF_KINDS:
            if self.ff.trainer not in TRAINERS_BY_KIND[self.kind]:
                raise_config_error(
                    f"kind {self.kind} runs trainers {TRAINERS_BY_KIND[self.kind]}, got {self.ff.trainer}"
                )
            self.ff.validate()
        elif self.kind in RNN_KINDS:
            if self.tbptt.task != TASK_BY_KIND[self.kind]:
                raise_config_error(f"kind {self.kind} needs TBPTT_TASK={TASK_BY_KIND[self.kind]}, got {self.tbptt.task}")
            self.tbptt.validate()
        else:
            self.two_net.validate()

    @property
    def run_name(self) -> str:
        return f"{self.kind}-seed{self.seed}"


def save_experiment_config(config: ExperimentConfig, path: pathlib.Path) -> pathlib.Path:
    return save_config_file(config, path)


def load_experiment_config(path: pathlib.Path) -> ExperimentConfig:
    config = load_config_file(ExperimentConfig, path)
    config.validate()
    return config


def with_overrides(config: ExperimentConfig, overrides: dict[str, str]) -> ExperimentConfig:
    """Copy of config with KEY=value overrides applied (keys as in the config file)."""
    values = flatten_dataclass(config)
    allowed = known_keys(ExperimentConfig)
    for key, value in overrides.items():
        key = key.upper()
        if key not in allowed:
            raise_config_error(f"Unknown config key: {key}")
        values[key] = value
    return build_dataclass(ExperimentConfig, values)


def clone(config: ExperimentConfig) -> ExperimentConfig:
    return dataclasses.replace(
        config,
        ff=dataclasses.replace(config.ff),
        tbptt=dataclasses.replace(config.tbptt),
        two_net=dataclasses.replace(config.two_net),
    )
