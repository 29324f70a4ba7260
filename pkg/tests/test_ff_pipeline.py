import time

import numpy as np
import pytest

from trainers.ff_dni import build_ff_network
from trainers.ff_pipeline import QUEUE_TIMEOUT_SECONDS, run_pipeline
from utils.utils_config import ConfigError
from utils.utils_numerics import make_rng


def batches(spec, count, seed=0):
    rng = make_rng(seed)
    for _ in range(count):
        yield rng.uniform(0.0, 1.0, (spec.batch_size, spec.input_dim)), rng.integers(0, spec.num_classes, spec.batch_size)


def test_pipeline_trains_every_segment(tiny_spec, rng):
    net = build_ff_network(tiny_spec(), rng)
    result = run_pipeline(net, batches(net.spec, 6))
    assert result.steps == 6
    assert len(result.losses) == 6 and all(np.isfinite(result.losses))
    assert sorted(result.sg_losses) == [1, 2]
    assert all(len(losses) == 6 for losses in result.sg_losses.values())
    # the top segment always receives the true gradient
    assert net.blocks[2].linear._adam["W"].t == 6


def test_pipeline_needs_sg_models(tiny_spec, rng):
    net = build_ff_network(tiny_spec("backprop", placement="every"), rng)
    with pytest.raises(ConfigError):
        run_pipeline(net, batches(net.spec, 1))


def test_pipeline_failure_stops_waiting_workers(tiny_spec, rng):
    net = build_ff_network(tiny_spec(), rng)
    bad = [(x, np.full_like(y, net.spec.num_classes)) for x, y in batches(net.spec, 3)]
    started = time.monotonic()
    with pytest.raises(IndexError):
        run_pipeline(net, bad)
    # lower workers still hold pending SG targets; they must not sit out the queue timeout
    assert time.monotonic() - started < QUEUE_TIMEOUT_SECONDS / 4
