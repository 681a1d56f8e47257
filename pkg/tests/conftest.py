"""Shared fixtures for the test suite"""

import numpy as np
import pytest

from modules.cmt_model import ModelConfig
from modules.scene_generator import SceneConfig, generate_dataset
from modules.tensor import set_checked, set_default_dtype
from modules.trainer import TrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run long acceptance tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def tensor_defaults():
    set_default_dtype('float64')
    set_checked(True)
    yield
    set_default_dtype('float64')
    set_checked(True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_scene_config():
    return SceneConfig(height=16, width=16, max_shapes=2)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(dim=8, num_queries=4, num_layers=2, num_points=2, stem_channels=4,
                       num_sampled_pixels=8)


@pytest.fixture
def tiny_train_config():
    return TrainConfig(iterations=4, warmup=1, log_interval=1, base_lr=1e-3)


@pytest.fixture
def tiny_samples(small_scene_config):
    return generate_dataset(3, seed=7, config=small_scene_config)
