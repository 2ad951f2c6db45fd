# tests/conftest.py
import numpy as np
import pytest

from data import InstancePool, generate_bags, synth2d_pool
from milmodel import ModelSpec, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def synth_pool():
    return synth2d_pool(seed=7)


@pytest.fixture
def small_spec():
    return ModelSpec(in_dim=2, encoder_sizes=(8, 6), attention_dim=5, residual_dim=4)


@pytest.fixture
def small_params(small_spec, rng):
    return init_params(small_spec, rng)


@pytest.fixture
def tiny_pool(rng):
    """20 instances in 3 dimensions, classes 0..3, class 1 positive."""
    return InstancePool(rng.normal(size=(20, 3)), np.arange(20) % 4, positive_class=1)


@pytest.fixture
def synth_bags(synth_pool):
    return generate_bags(synth_pool, 40, seed=3)
