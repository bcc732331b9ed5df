import numpy as np
import pytest

from koopman_mpc.harness import generate_dataset
from koopman_mpc.edmd import solve_model


@pytest.fixture(scope="session")
def desk_dataset():
    """5000 training trajectories (200k pairs) plus 500 held out, seed 0."""
    return generate_dataset(5500, 40, seed=0, n_test=500)


@pytest.fixture(scope="session")
def bilinear_model(desk_dataset):
    return solve_model(desk_dataset.accumulator, 1e-9)


@pytest.fixture(scope="session")
def linear_model(desk_dataset):
    return solve_model(desk_dataset.accumulator.to_linear(), 1e-9)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
