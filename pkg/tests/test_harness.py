import dataclasses
import pathlib
import shutil

import numpy as np
import pandas as pd
import pytest

from harness.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from harness.experiment_config import ExperimentConfig, save_experiment_config
from harness.experiments import (
    CHECKPOINT_FILE,
    MANIFEST_FILE,
    METRICS_FILE,
    parse_grid,
    parse_random,
    run,
    scheduled_lr,
    sweep,
    sweep_points,
)
from trainers.ff_dni import FfNetworkSpec
from trainers.multi_net import TwoNetConfig
from trainers.rnn_dni import TbpttConfig
from utils.utils_checkpoint import load_checkpoint
from utils.utils_config import ConfigError
from utils.utils_metrics import load_metrics
from utils.utils_numerics import make_rng

CORPUS = pathlib.Path(__file__).parent.parent / "data" / "text" / "corpus.txt"


def ff_config(root, name="run", **changes):
    config = ExperimentConfig(
        kind="ff-mnist",
        budget=20,
        out_dir=str(root / name),
        dataset="synthetic",
        log_every=5,
        eval_every=10,
        lr_schedule=False,
        eval_size=50,
        ff=FfNetworkSpec(hidden=8, sg_hidden_width=8, batch_size=8, lr=1e-3),
    )
    return dataclasses.replace(config, **changes)


def two_net_config(root, name="run", **changes):
    config = ExperimentConfig(
        kind="multi-net",
        budget=4,
        out_dir=str(root / name),
        dataset="synthetic",
        log_every=1,
        eval_every=2,
        lr_schedule=False,
        eval_size=50,
        two_net=TwoNetConfig(T=2, message_dim=4, units=6, hidden=8, sg_hidden_width=8, batch=4, lr=1e-3),
    )
    return dataclasses.replace(config, **changes)


def metrics_text(config):
    return pathlib.Path(config.out_dir, METRICS_FILE).read_text()


#####################################
# Single Runs
#####################################


def test_zero_budget_writes_header_only(tmp_path):
    config = ff_config(tmp_path, budget=0)
    path = run(config)
    assert path.read_text().splitlines() == ["step,samples,task_loss,layers_updated,lr,sg_loss_1,sg_loss_2,test_error"]
    assert load_checkpoint(pathlib.Path(config.out_dir, CHECKPOINT_FILE)).meta["step"] == 0


def test_rows_follow_log_and_eval_cadence(tmp_path):
    frame = load_metrics(run(ff_config(tmp_path)))
    assert list(frame["step"]) == [5, 10, 15, 20]
    assert list(frame["samples"]) == [40, 80, 120, 160]
    assert list(frame["test_error"].notna()) == [False, True, False, True]
    assert frame["task_loss"].notna().all()
    assert pathlib.Path(tmp_path, "run", "config.env").exists()


def test_identical_configs_give_identical_files(tmp_path):
    first = run(ff_config(tmp_path, "a"))
    second = run(ff_config(tmp_path, "b"))
    assert first.read_bytes() == second.read_bytes()


def test_seed_changes_the_run(tmp_path):
    first = run(ff_config(tmp_path, "a"))
    second = run(ff_config(tmp_path, "b", seed=1))
    assert first.read_bytes() != second.read_bytes()


def test_bp_lambda_check_tracks_backprop(tmp_path):
    config = ff_config(tmp_path, kind="bp-lambda-check", budget=10)
    config.ff = dataclasses.replace(config.ff, n_layers=4, trainer="bp_lambda", bp_lambda=1.0)
    frame = load_metrics(run(config))
    assert (frame["max_param_divergence"] < 1e-12).all()
    assert frame["reference_test_error"].notna().iloc[-1]


def test_curriculum_run_counts_episodes(tmp_path):
    config = ExperimentConfig(
        kind="rnn-copy",
        budget=12,
        out_dir=str(tmp_path / "copy"),
        log_every=2,
        eval_every=2,
        tbptt=TbpttConfig(T=3, units=8, batch=4, width=3, lr=1e-3, rolling_window=4),
    )
    frame = load_metrics(run(config))
    assert frame["samples"].iloc[-1] >= 12
    assert (frame["level_n"] >= 1).all()
    assert frame["step"].is_monotonic_increasing


def test_char_run_reports_bpc(tmp_path):
    config = ExperimentConfig(
        kind="rnn-chars",
        budget=6,
        out_dir=str(tmp_path / "chars"),
        log_every=3,
        eval_every=3,
        tbptt=TbpttConfig(task="chars", T=4, units=8, batch=4, lr=1e-3, aux_enabled=True, text_path=str(CORPUS)),
    )
    frame = load_metrics(run(config))
    assert list(frame["step"]) == [3, 6]
    assert list(frame["samples"]) == [48, 96]
    assert np.isfinite(frame["bpc"]).all()


def test_two_net_run_reports_chance_level(tmp_path):
    frame = load_metrics(run(two_net_config(tmp_path)))
    assert list(frame["b_updates"]) == [1.0, 2.0, 3.0, 4.0]
    assert list(frame["a_updates"]) == [2.0, 4.0, 6.0, 8.0]
    assert list(frame["eval_error_b"].notna()) == [False, True, False, True]
    assert frame["chance_error_b"].between(0.0, 1.0).all()


#####################################
# Resume
#####################################


@pytest.mark.slow
@pytest.mark.parametrize("make_config, half", [(ff_config, 10), (two_net_config, 2)])
def test_resume_matches_uninterrupted_run(tmp_path, make_config, half):
    full = make_config(tmp_path, "full")
    run(full)
    partial = make_config(tmp_path, "partial", budget=half)
    run(partial)
    run(dataclasses.replace(partial, budget=full.budget), resume=pathlib.Path(partial.out_dir, CHECKPOINT_FILE))
    assert metrics_text(partial) == metrics_text(full)


def test_resume_from_older_checkpoint_rewrites_later_rows(tmp_path):
    full = ff_config(tmp_path, "full")
    run(full)
    partial = ff_config(tmp_path, "partial", budget=10)
    run(partial)
    early = tmp_path / "early.ckpt"
    shutil.copyfile(pathlib.Path(partial.out_dir, CHECKPOINT_FILE), early)
    finished = dataclasses.replace(partial, budget=20)
    run(finished, resume=pathlib.Path(partial.out_dir, CHECKPOINT_FILE))
    run(finished, resume=early)
    assert list(load_metrics(pathlib.Path(partial.out_dir, METRICS_FILE))["step"]) == [5, 10, 15, 20]
    assert metrics_text(partial) == metrics_text(full)


def test_resume_rejects_changed_config(tmp_path):
    config = ff_config(tmp_path, budget=5)
    run(config)
    changed = dataclasses.replace(config, ff=dataclasses.replace(config.ff, lr=1e-2))
    with pytest.raises(ConfigError, match="FF_LR"):
        run(changed, resume=pathlib.Path(config.out_dir, CHECKPOINT_FILE))


#####################################
# Sweeps
#####################################


def test_parse_grid():
    assert parse_grid(["ff_p_update=0.2, 1.0"]) == {"FF_P_UPDATE": ["0.2", "1.0"]}
    with pytest.raises(ConfigError):
        parse_grid(["FF_P_UPDATE"])


def test_parse_random_is_seeded():
    first = parse_random(["FF_LR=0.001:0.01:4"], make_rng(0))
    assert first == parse_random(["FF_LR=0.001:0.01:4"], make_rng(0))
    assert all(0.001 <= float(v) <= 0.01 for v in first["FF_LR"])
    with pytest.raises(ConfigError):
        parse_random(["FF_LR=1:2"], make_rng(0))


def test_sweep_points_are_a_product(tmp_path):
    template = ff_config(tmp_path, "sweep", seed=10)
    points = sweep_points(template, {"FF_LR": ["0.001", "0.01"], "FF_STALE_DECAY": ["0.5", "0.9", "0.99"]})
    assert len(points) == 6
    assert [p.seed for p in points] == list(range(10, 16))
    assert points[4].out_dir == str(tmp_path / "sweep" / "run_0004")
    with pytest.raises(ConfigError):
        sweep_points(template, {"FF_COLOUR": ["red"]})


@pytest.mark.slow
def test_sweep_over_update_probability(tmp_path):
    template = ff_config(tmp_path, "sweep", kind="ff-stochastic", budget=4, log_every=2, eval_every=4)
    template.ff = dataclasses.replace(template.ff, trainer="stochastic_dni")
    manifest = sweep(template, {"FF_P_UPDATE": ["0.0", "0.5", "1.0"]})
    assert list(manifest["status"]) == ["ok", "ok", "ok"]
    assert list(manifest["FF_P_UPDATE"]) == ["0.0", "0.5", "1.0"]
    for out_dir in manifest["out_dir"]:
        assert len(load_metrics(pathlib.Path(out_dir, METRICS_FILE))) == 2
    saved = pd.read_csv(tmp_path / "sweep" / MANIFEST_FILE)
    assert len(saved) == 3


def test_scheduled_lr():
    assert scheduled_lr(1.0, 60, 100) == 1.0
    assert scheduled_lr(1.0, 61, 100) == pytest.approx(0.1)
    assert scheduled_lr(1.0, 81, 100) == pytest.approx(0.01)
    assert scheduled_lr(1.0, 5, 0) == 1.0


#####################################
# Command Line
#####################################


@pytest.fixture
def cli_env(monkeypatch, tmp_path):
    monkeypatch.setenv("DNI_LOG_DIR", str(tmp_path / "logs"))
    return tmp_path


def test_cli_run_and_inspect(cli_env):
    config_path = save_experiment_config(ff_config(cli_env, budget=5), cli_env / "tiny.env")
    out = cli_env / "cli_run"
    assert main(["run", "--config", str(config_path), "--out", str(out)]) == EXIT_OK
    assert (out / METRICS_FILE).exists()
    assert main(["inspect-checkpoint", str(out / CHECKPOINT_FILE)]) == EXIT_OK


def test_cli_config_errors(cli_env):
    assert main(["run", "--config", str(cli_env / "missing.env")]) == EXIT_CONFIG
    config_path = save_experiment_config(ff_config(cli_env, budget=5), cli_env / "tiny.env")
    assert main(["sweep", "--config", str(config_path)]) == EXIT_CONFIG


def test_cli_unreadable_inputs(cli_env):
    bad = cli_env / "bad.ckpt"
    bad.write_bytes(b"garbage!")
    assert main(["inspect-checkpoint", str(bad)]) == EXIT_DATA
    config_path = save_experiment_config(ff_config(cli_env, budget=5), cli_env / "tiny.env")
    assert main(["run", "--config", str(config_path), "--resume", str(cli_env / "none.ckpt")]) == EXIT_DATA


def test_cli_usage_error_exits():
    with pytest.raises(SystemExit):
        main(["train"])
