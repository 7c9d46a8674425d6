import numpy as np
import pytest

from ddslit import ExperimentParams, build_initial_state


@pytest.fixture(scope="session")
def params():
    return ExperimentParams()


@pytest.fixture(scope="session")
def state2(params):
    return build_initial_state(params)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260826)
