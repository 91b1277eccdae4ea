import logging

import numpy as np
import pytest

from netmis import simgen


@pytest.fixture(autouse=True)
def _quiet_clipping():
    # heavy clipping is routine at N=1000; keep test logs readable
    logging.getLogger("netmis").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def sim1000():
    return simgen.simulate(simgen.SimConfig(n=1000, seed=101))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
