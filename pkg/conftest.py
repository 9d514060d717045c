# Dependencies:
# pip install pytest pytest-mock
import numpy as np
import pytest

from config.schemas import ModelConfig, SceneConfig


@pytest.fixture
def tiny_model_config():
    return ModelConfig.toy()


@pytest.fixture
def scene_config():
    return SceneConfig(height=64, width=64, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def binary_batch(rng):
    """(2, 3, 64, 64) image and (2, 1, 64, 64) mask."""
    image = rng.random((2, 3, 64, 64)).astype(np.float32)
    mask = (rng.random((2, 1, 64, 64)) > 0.5).astype(np.float32)
    return image, mask


def pytest_addoption(parser):
    parser.addoption("--run-slow", action="store_true", default=False, help="Run the end-to-end training benchmark")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs taking minutes")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
