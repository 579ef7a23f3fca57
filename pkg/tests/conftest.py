import math

import numpy as np
import pytest
from hypothesis import strategies as st

from cmmv.equilibrium import solve_fixed_point
from cmmv.limit import GridConfig, continuous_fixed_point, solve_ode_D
from cmmv.measures import FiniteMeasure, UniformMeasure
from cmmv.risk import linear_risk, softplus_risk


@pytest.fixture(scope="session")
def mu():
    return UniformMeasure()


@pytest.fixture(scope="session")
def h_ref():
    """Reference strictly convex risk ``x/2 + log(1 + e^x)``."""
    return softplus_risk()


@pytest.fixture(scope="session")
def h_neutral():
    return linear_risk(1.0)


@pytest.fixture(scope="session")
def ref_solutions(mu, h_ref):
    cache = {}

    def get(n):
        if n not in cache:
            cache[n] = solve_fixed_point(mu, n, h_ref)
        return cache[n]

    return get


@pytest.fixture(scope="session")
def ref_ode(mu, h_ref):
    return solve_ode_D(mu, h_ref)


@pytest.fixture(scope="session")
def neutral_ode(mu, h_neutral):
    return solve_ode_D(mu, h_neutral)


@pytest.fixture(scope="session")
def ref_grid(mu, h_ref):
    """Grid fixed point of the reference case at the default resolution."""
    return continuous_fixed_point(mu, h_ref, GridConfig())


@st.composite
def finite_measures(draw, max_size=5, low=-3.0, high=3.0):
    """Random finite measures with well separated atoms and non-negligible weights."""
    size = draw(st.integers(1, max_size))
    pts = draw(st.lists(st.floats(low, high, allow_nan=False), min_size=size, max_size=size,
                        unique_by=lambda x: round(x, 3)))
    pts = np.sort(np.asarray(pts))
    if size > 1 and np.min(np.diff(pts)) < 1e-3:
        pts = np.linspace(low, high, size)
    raw = draw(st.lists(st.floats(0.05, 1.0), min_size=size, max_size=size))
    w = np.asarray(raw)
    return FiniteMeasure(pts, w / math.fsum(w))


ACCEPTANCE_LINES: list = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
