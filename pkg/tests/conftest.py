import numpy as np
import pytest

from fedpmt.data import Dataset, generate_synthetic
from fedpmt.model import build_cnn, build_fcnn, init_params


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the desk-scale acceptance runs')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: desk-scale acceptance run')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def fcnn_spec():
    return build_fcnn([6, 5, 4, 3])


@pytest.fixture
def cnn_spec():
    # (1, 8, 8) -> conv3 (2, 6, 6) -> pool (2, 3, 3) -> 18 -> 4 -> 3
    return build_cnn((1, 8, 8), [2], [4, 3], kernel=3)


@pytest.fixture
def fcnn_params(fcnn_spec):
    return init_params(fcnn_spec, 0)


@pytest.fixture
def toy_dataset():
    rng = np.random.RandomState(0)
    return Dataset(rng.normal(size=(20, 6)), rng.randint(0, 3, size=20), 3)


@pytest.fixture
def clusters():
    return generate_synthetic(4, 6, 50, 3., seed=0)
