import numpy as np
import pytest

from semstack import synthgen


@pytest.fixture(scope="session")
def small_dataset_config():
    return synthgen.DatasetConfig(height=16, width=16, n_train=6, n_test_source=4, n_test_target=4,
                                  stack_size=4, seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_dataset_config):
    return synthgen.gen_dataset(small_dataset_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
