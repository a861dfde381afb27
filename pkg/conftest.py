import os
import sys

import pytest

sys.path.insert(0, os.path.abspath(os.path.dirname(__file__)))

from config import ModelConfig, SynthSpec  # noqa: E402
from synth import generate_split  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_ledger(monkeypatch):
    # ledger off unless a test turns it on
    monkeypatch.setenv("MIM_RUNS_DATABASE_URL", "")


@pytest.fixture
def tiny_model_config():
    """4 frames of 16x16 -> 2x2x8 maps, 2 BiGRU layers of 4 units, 3 classes."""
    return ModelConfig(
        frames=4,
        image_size=16,
        num_classes=3,
        frontend_channels=4,
        conv3d_kernel=(3, 3, 3),
        conv3d_stride=(1, 2, 2),
        conv3d_padding=(1, 1, 1),
        backbone_channels=(4, 8),
        backbone_strides=(1, 2),
        gru_hidden=4,
        gru_layers=2,
        weight_head_hidden=4,
        gmim_hidden=8,
    )


@pytest.fixture(scope="session")
def tiny_spec():
    return SynthSpec(
        num_classes=3,
        frames=4,
        image_size=16,
        window_min=2,
        window_max=3,
        confusable_pairs=((0, 1),),
        translation=1,
        train_per_class=4,
        test_per_class=2,
        distractor_pool=2,
        seed=5,
    )


@pytest.fixture(scope="session")
def tiny_train_set(tiny_spec):
    return generate_split(tiny_spec, "train")


@pytest.fixture(scope="session")
def tiny_test_set(tiny_spec):
    return generate_split(tiny_spec, "test")
