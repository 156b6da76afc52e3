import numpy as np
import pytest

from devias.model import ModelConfig
from devias.world import WorldConfig, make_split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    return WorldConfig(height=16, width=16, n_train=48, n_test=24, n_teacher=48, seed=3)


@pytest.fixture(scope="session")
def small_train(small_world):
    return make_split(small_world, "train")


@pytest.fixture(scope="session")
def tiny_model():
    return ModelConfig(dim=16, heads=2, depth=1, patch=8, mlp_ratio=2, frames=8, height=16,
                       width=16, num_slots=2, iters=2, slot_hidden=32)
