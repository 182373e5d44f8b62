import warnings

import numpy as np
import pytest

from oddhum.control import ControlConfig
from oddhum.grid import make_grid
from oddhum.weights import WeightFamily, WeightUnderflowWarning, select_exponents


@pytest.fixture(autouse=True)
def _quiet_underflow():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", WeightUnderflowWarning)
        yield


@pytest.fixture
def small_grid():
    return make_grid(1.0, 1.0, 16, 32)


@pytest.fixture
def small_weights(small_grid):
    return WeightFamily.build(small_grid, select_exponents(1, 1, 3))


@pytest.fixture
def small_cfg():
    return ControlConfig(nx=16, nt=32)


@pytest.fixture
def sine():
    def make(grid, amp=1.0):
        return amp * np.sin(np.pi * grid.x / grid.L)

    return make
