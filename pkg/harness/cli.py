"""
cli.py - command line entry point.

    python -m harness.cli run --config data/experiments/ff_mnist.env [--seed N] [--out DIR] [--resume CKPT]
    python -m harness.cli sweep --config BASE.env --grid FF_P_UPDATE=0.2,1.0 [--random KEY=lo:hi:n] [--workers N]
    python -m harness.cli verify [--seed N]
    python -m harness.cli inspect-checkpoint PATH

Exit codes: 0 success, 1 failed checks or runtime failure, 2 bad config
or usage, 3 unreadable data or checkpoint.
"""

#####################################
# Import Modules
#####################################

# Import packages from Python Standard Library
import argparse
import dataclasses
import pathlib
import sys

# Import external packages
import pandas as pd

# Import functions from local modules
from harness.experiment_config import ExperimentConfig, load_experiment_config
from harness.experiments import parse_grid, parse_random, run, sweep
from harness.verify import results_table, run_checks
from tasks.tasks_mnist import MnistFormatError
from utils.utils_checkpoint import CheckpointFormatError, inspect_checkpoint
from utils.utils_config import ConfigError, load_environment
from utils.utils_logger import configure_logger, logger
from utils.utils_numerics import DimensionError, make_rng

#####################################
# Default Configurations
#####################################

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3

#####################################
# Argument Parsing
#####################################


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dni", description="Decoupled training experiments.")
    verbs = parser.add_subparsers(dest="verb", required=True)

    run_p = verbs.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", type=pathlib.Path, help="KEY=value experiment file")
    run_p.add_argument("--seed", type=int, help="override SEED")
    run_p.add_argument("--out", type=pathlib.Path, help="override OUT_DIR")
    run_p.add_argument("--resume", type=pathlib.Path, help="checkpoint to resume from")

    sweep_p = verbs.add_parser("sweep", help="run a grid of experiments")
    sweep_p.add_argument("--config", type=pathlib.Path, help="base experiment file")
    sweep_p.add_argument("--seed", type=int, help="base seed; point i uses seed + i")
    sweep_p.add_argument("--out", type=pathlib.Path, help="sweep root directory")
    sweep_p.add_argument("--grid", action="append", default=[], metavar="KEY=v1,v2")
    sweep_p.add_argument("--random", action="append", default=[], metavar="KEY=low:high:count")
    sweep_p.add_argument("--workers", type=int, default=1)

    verify_p = verbs.add_parser("verify", help="run the numerical self-checks")
    verify_p.add_argument("--seed", type=int, default=0)

    inspect_p = verbs.add_parser("inspect-checkpoint", help="describe a checkpoint file")
    inspect_p.add_argument("path", type=pathlib.Path)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.out is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    config.validate()
    return config


#####################################
# Verbs
#####################################


def cmd_run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    metrics_path = run(config, resume=args.resume)
    logger.info(f"Metrics written to {metrics_path}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    grid = parse_grid(args.grid)
    grid.update(parse_random(args.random, make_rng(config.seed)))
    if not grid:
        logger.error("sweep needs at least one --grid or --random item")
        return EXIT_CONFIG
    manifest = sweep(config, grid, workers=args.workers)
    failed = int((manifest["status"] != "ok").sum())
    logger.info(f"Sweep finished: {len(manifest)} runs, {failed} failed")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    results = run_checks(seed=args.seed)
    with pd.option_context("display.width", 120):
        print(results_table(results).to_string(index=False))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_inspect(args: argparse.Namespace) -> int:
    meta, table = inspect_checkpoint(args.path)
    print(f"kind: {meta.get('kind')}  step: {meta.get('step')}  samples: {meta.get('samples')}")
    with pd.option_context("display.width", 120, "display.max_rows", None):
        print(table.to_string(index=False))
    return EXIT_OK


VERBS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "verify": cmd_verify,
    "inspect-checkpoint": cmd_inspect,
}

#####################################
# Main Function
#####################################


def main(argv: list[str] | None = None) -> int:
    load_environment()
    configure_logger()
    args = build_parser().parse_args(argv)
    logger.info(f"START dni {args.verb}")
    try:
        status = VERBS[args.verb](args)
    except (ConfigError, DimensionError, ValueError) as e:
        if isinstance(e, (CheckpointFormatError, MnistFormatError)):
            logger.error(f"Unreadable input: {e}")
            return EXIT_DATA
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error(f"Missing file: {e}")
        return EXIT_DATA
    except KeyboardInterrupt:
        logger.warning("Interrupted by user.")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Run failed: {e}")
        return EXIT_FAILURE
    logger.info(f"END dni {args.verb} (exit {status})")
    return status


#####################################
# Conditional Execution
#####################################

if __name__ == "__main__":
    sys.exit(main())
