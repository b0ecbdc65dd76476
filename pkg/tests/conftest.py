import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from iseat.model import ModelParams, ModelSpec, init_params

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"


def random_params(widths, activation="tanh", seed=0, scale=1.0) -> ModelParams:
    """Network with N(0, scale^2/fan_in) weights and non-zero biases."""
    spec = ModelSpec(tuple(widths), activation, seed)
    rng = np.random.default_rng(seed)
    ws = [rng.normal(0, scale / np.sqrt(a), (a, b)) for a, b in zip(widths, widths[1:])]
    bs = [rng.normal(0, 0.1, b) for b in widths[1:]]
    return ModelParams(spec, ws, bs)


@pytest.fixture
def tiny_net():
    return random_params((3, 5, 2), "tanh", seed=7)


@pytest.fixture
def relu_net():
    return init_params(ModelSpec((2, 16, 2), "relu", 3))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
