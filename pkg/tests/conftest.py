import numpy as np
import pytest

from signattack.data import stack, synth_signs
from signattack.model import Model, ModelConfig, TrainConfig, train

MINI_CONFIG = ModelConfig(input_resolution=8, num_classes=8, conv_blocks=((8, 3),), dense_width=32)


@pytest.fixture(scope="session")
def mini_data():
    return synth_signs(8, 100, 8, 3)


@pytest.fixture(scope="session")
def mini_model(mini_data):
    """8x8-input classifier, trained in well under a second."""
    model, _ = train(MINI_CONFIG, mini_data, TrainConfig(epochs=20, seed=3))
    return model


@pytest.fixture(scope="session")
def mini_test(mini_data):
    return stack(mini_data.test)


@pytest.fixture
def untrained():
    cfg = ModelConfig(input_resolution=8, num_classes=4, conv_blocks=((4, 3),), dense_width=8)
    return Model(cfg, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


DESK_CONFIG = ModelConfig(input_resolution=32, num_classes=8)
DESK_TRAIN = TrainConfig(epochs=20, learning_rate=0.05, weight_decay=0.0005, seed=7)


@pytest.fixture(scope="session")
def desk_data():
    return synth_signs(8, 200, 32, seed=7)


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """The full-size 8-class desk model; trained once per session (about a minute)."""
    import time

    t0 = time.perf_counter()
    model, history = train(DESK_CONFIG, desk_data, DESK_TRAIN)
    return model, history, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_model(desk_run):
    return desk_run[0]


@pytest.fixture(scope="session")
def desk_slice(desk_data):
    """The fixed 200-image test slice used by the sweep and attack comparisons."""
    return stack(desk_data.test[:200])


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERIA_LOG", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line[1])
