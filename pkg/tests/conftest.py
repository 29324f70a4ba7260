"""Shared fixtures for the test suite."""

import numpy as np
import pytest

from trainers.ff_dni import FfNetworkSpec
from utils.utils_numerics import make_rng


@pytest.fixture(autouse=True)
def no_metrics_stream(monkeypatch):
    # tests never talk to a Kafka broker
    monkeypatch.delenv("DNI_METRICS_TOPIC", raising=False)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(0)


@pytest.fixture
def tiny_spec():
    def build(trainer: str = "dni", **overrides) -> FfNetworkSpec:
        values = dict(
            n_layers=3,
            hidden=8,
            input_dim=6,
            num_classes=3,
            sg_hidden_width=8,
            trainer=trainer,
            lr=1e-3,
            batch_size=8,
        )
        values.update(overrides)
        return FfNetworkSpec(**values)

    return build


@pytest.fixture
def tiny_batch(rng):
    x = rng.uniform(0.0, 1.0, (8, 6))
    y = rng.integers(0, 3, size=8)
    return x, y
