import numpy as np
import pytest

from conceptmark import codec


@pytest.fixture(scope="session")
def bank32():
    return codec.build_carrier_bank(seed=7, b=160, shape=(32, 32, 3))


@pytest.fixture(scope="session")
def bank64():
    return codec.build_carrier_bank(seed=7, b=160, shape=(64, 64, 3))


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
