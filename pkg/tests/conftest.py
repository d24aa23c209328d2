import numpy as np
import pytest

from mcpgraph.core import ScalingSet
from mcpgraph.forcing import from_arrays


def random_forcing(n, seed=0, q=True):
    rng = np.random.default_rng(seed)
    dates = np.datetime64("2000-10-01") + np.arange(n)
    precip = rng.gamma(0.5, 8.0, n) * (rng.random(n) < 0.5)
    pet = rng.uniform(0.0, 6.0, n)
    flow = rng.gamma(2.0, 1.0, n) if q else None
    return from_arrays(dates, precip, pet, flow)


def store_scaling(forcing):
    return ScalingSet.from_forcing(forcing, {"soil": (60.0, 30.0), "routing": (5.0, 3.0), "groundwater": (40.0, 15.0)})


@pytest.fixture
def forcing_1000():
    return random_forcing(1000, seed=1)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
