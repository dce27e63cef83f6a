import numpy as np
import pytest

from bellcnn import BellConfig, build_bellcnn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_config():
    """32x32 single-channel config: five poolings end at a 1x1 map."""
    return BellConfig(input_w=32, input_h=32, seed=7)


@pytest.fixture
def small_graph(small_config):
    return build_bellcnn(small_config)
