import os

import pytest
from hypothesis import HealthCheck, settings

from bgfield.lattice import LatticeParams
from bgfield.operator import model_operators

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# desk lattice: 243 unit points and 59049 fine points at step 1
DESK = LatticeParams(3, 81, 9, n_steps=2)
# one spatial axis, three steps (19683 fine points)
REDUCED = LatticeParams(3, 729, 27, n_steps=3, spatial_dims=1)
# temporal axis only, 27 fine points at step 1
TINY = LatticeParams(3, 27, 1, n_steps=1, spatial_dims=0)
# small lattices for dense oracles
SMALL = LatticeParams(3, 81, 3, n_steps=1, spatial_dims=1)
SMALL2 = LatticeParams(3, 81, 9, n_steps=2, spatial_dims=1)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def desk1():
    return model_operators(DESK, 1)


@pytest.fixture(scope="session")
def small1():
    return model_operators(SMALL, 1)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
