import numpy as np
import pytest

from underflow import validate
from underflow.dp import default_grids_2rx, solve_2rx
from underflow.fixtures import example2


@pytest.fixture(scope="session")
def example2_vg():
    """Example 2 solved on the 0.02 grid (about 15 s, shared by the session)."""
    v = validate(example2())
    return solve_2rx(v, default_grids_2rx(v, 0.02))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
