import numpy as np
import pytest

from merton_tc.corrector import first_corrector_at, second_corrector_crra
from merton_tc.hjb import merton_grid, solve_hjb_2d
from merton_tc.merton import merton_crra
from merton_tc.model import CRRA, ModelParams

P0 = dict(r=0.02, mu=0.10, sigma=0.40, beta=0.10, lambda_buy=0.01, lambda_sell=0.01)
COARSE = (0.012, 0.017)


@pytest.fixture(scope="session")
def p0():
    return ModelParams(**P0, epsilon=0.2)


@pytest.fixture(scope="session")
def crra():
    return CRRA(2.0)


@pytest.fixture(scope="session")
def m0(p0):
    return merton_crra(p0, 2.0)


@pytest.fixture(scope="session")
def fc0(m0):
    return first_corrector_at(m0, 1.0, 0.01, 0.01)


@pytest.fixture(scope="session")
def sc0(m0, fc0):
    return second_corrector_crra(m0, fc0)


@pytest.fixture(scope="session")
def coarse_grid():
    return merton_grid(0.25, steps=COARSE)


@pytest.fixture(scope="session")
def sol02(p0, crra, m0, coarse_grid):
    return solve_hjb_2d(p0, crra, coarse_grid, m0)


@pytest.fixture(scope="session")
def sol01(p0, crra, m0, coarse_grid):
    return solve_hjb_2d(p0.replace(epsilon=0.1), crra, coarse_grid, m0)


@pytest.fixture(scope="session")
def sol_free(p0, crra, coarse_grid):
    p = p0.replace(lambda_buy=0.0, lambda_sell=0.0)
    return solve_hjb_2d(p, crra, coarse_grid, merton_crra(p, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
