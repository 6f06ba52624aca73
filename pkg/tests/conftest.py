import warnings

import numpy as np
import pytest

from vck.grid import build_grid
from vck.model import ModelParams


@pytest.fixture
def params():
    return ModelParams()


@pytest.fixture
def small_grid(params):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_grid(params, 16, 16, 8.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def quiet_grid(p, n_v, n_y, y_max=8.0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_grid(p, n_v, n_y, y_max)
