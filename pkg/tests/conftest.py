import numpy as np
import pytest

from aimr.oracle import DenseOracle
from aimr.problems import build_rad2d
from aimr.tensor import CanonicalTensor


def random_ct(rng, dims, rank):
    return CanonicalTensor([rng.standard_normal((n, rank)) for n in dims])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def rad10():
    return build_rad2d(10)


@pytest.fixture(scope="session")
def rad10_oracle(rad10):
    return DenseOracle(rad10)


@pytest.fixture(scope="session")
def rad6():
    return build_rad2d(6, {"advection_degree": 2, "reaction_degree": 2})


@pytest.fixture(scope="session")
def rad6_oracle(rad6):
    return DenseOracle(rad6)
