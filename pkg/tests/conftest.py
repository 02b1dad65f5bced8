import numpy as np
import pytest

from filterdual.markov_model import FiniteModel, canonical_model
from filterdual.path_sim import TimeGrid, simulate_bundle


@pytest.fixture(scope="session")
def canon():
    return canonical_model()


@pytest.fixture(scope="session")
def grid():
    return TimeGrid(1.0, 1000)


@pytest.fixture(scope="session")
def canon_bundle(canon, grid):
    return simulate_bundle(canon, grid, 2000, 123)


@pytest.fixture(scope="session")
def asym():
    """Three states with unequal rates; the covariation rate depends on pi."""
    A = np.array([[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
    H = np.array([[2.0], [0.0], [-1.0]])
    return FiniteModel(A=A, H=H, R=[[0.5]], prior=[0.5, 0.3, 0.2])


@pytest.fixture(scope="session")
def asym_bundle(asym, grid):
    return simulate_bundle(asym, grid, 3000, 321)
