import hashlib

import pytest

from mmoe.builder import EnsembleConfig
from mmoe.data import synth_dataset, train_test_split
from mmoe.partition import SuperclassMap
from mmoe.training import TrainConfig, build_and_train

SYNTH_LAYERS = "conv:4:3, relu, pool:2, conv:8:3, relu, pool:2, flatten, fc:16, relu, fc:6"


def digest(net) -> str:
    h = hashlib.sha256()
    for p in net.params:
        if p is not None:
            h.update(p["W"].tobytes())
            h.update(p["b"].tobytes())
    return h.hexdigest()


@pytest.fixture(scope="session")
def synth_split():
    return train_test_split(synth_dataset(0, 6, 60, size=12), 0.25, 0)


@pytest.fixture(scope="session")
def synth_cfg():
    return EnsembleConfig.from_text(SYNTH_LAYERS, input_shape=(1, 12, 12), expert_head_width=16,
                                    mediator_head_width=16)


@pytest.fixture(scope="session")
def fast_train():
    return TrainConfig(epochs=6, expert_epochs=4, confidence_epochs=4, batch_size=16, lr=0.05, seed=0)


@pytest.fixture(scope="session")
def synth_ensemble(synth_split, synth_cfg, fast_train):
    """Trained 2-expert ensemble on the 6-class bar set (classes 0-2 / 3-5)."""
    return build_and_train(synth_cfg, SuperclassMap.contiguous([3, 3]), synth_split[0], fast_train)


# Acceptance lines are collected here and printed once in the terminal summary,
# so they show up regardless of output capturing.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (len(k), k)):
        terminalreporter.write_line(ACCEPTANCE[key])
