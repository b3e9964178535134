import numpy as np
import pytest

from c2hm.data_io import load_bundled_mnist, mnist_splits
from c2hm.model import ModelConfig, init_params
from c2hm.training import TrainConfig, train_c2hm


@pytest.fixture(scope="session")
def mnist():
    return mnist_splits(load_bundled_mnist())


@pytest.fixture(scope="session")
def small_mnist(mnist):
    train, test = mnist
    return train.head(2000), test.head(500)


@pytest.fixture(scope="session")
def trained(mnist):
    """A briefly trained model with its untrained starting point, for before/after checks."""
    train, _ = mnist
    config = TrainConfig(epochs=3, seed=7)
    before = init_params(config.model, config.seed)
    after, logs = train_c2hm(config, train, params=before.copy())
    return before, after, logs


@pytest.fixture
def tiny_params():
    return init_params(ModelConfig(d=3, k=4, D=6, num_classes=3, hidden=5, depth=1), seed=0)


@pytest.fixture
def rng_array():
    def make(seed, shape):
        return np.random.default_rng(seed).standard_normal(shape)
    return make
