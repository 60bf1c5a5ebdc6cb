import numpy as np
import pytest

from mflow.flows import FlowStack, LayerSpec
from mflow.rng import SplitMix64


def eight_layer_specs(D, hidden=(8,)):
    """Two repetitions of actnorm, invertible linear, even coupling, odd coupling."""
    specs = []
    for _ in range(2):
        specs += [
            LayerSpec("actnorm", D),
            LayerSpec("invertible_linear", D),
            LayerSpec("affine_coupling", D, hidden, "even"),
            LayerSpec("affine_coupling", D, hidden, "odd"),
        ]
    return specs


def random_stack(D, seed, hidden=(8,), scale=0.3):
    f = FlowStack.from_specs(eight_layer_specs(D, hidden), D, seed=seed)
    f.randomize(SplitMix64(seed + 1000), scale)
    return f


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
