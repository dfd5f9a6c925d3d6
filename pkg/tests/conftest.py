import numpy as np
import pytest

from amfc.cnn import ArchitectureSpec, ConvLayer, init_model
from amfc.data import synth_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    return synth_corpus(3, 20, h=16, jitter_px=1, seed=3)


@pytest.fixture(scope="session")
def toy_spec():
    """Two conv layers (second pooled) and one fc layer on 6x6 inputs."""
    return ArchitectureSpec(6, (ConvLayer(2, 3, False), ConvLayer(3, 3, True)), (3,))


@pytest.fixture
def toy_model(toy_spec):
    model = init_model(toy_spec, seed=7)
    rng = np.random.default_rng(7)
    for name in model.params:
        if name.endswith(".bias"):
            model.params[name] = rng.normal(0, 0.1, size=model.params[name].shape)
    return model


@pytest.fixture(scope="session")
def mini_model():
    """Untrained mini-VGG with random weights; enough for shape and chain checks."""
    from amfc.cnn import mini_vgg

    return init_model(mini_vgg(3), seed=11)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
