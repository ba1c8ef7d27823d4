import pytest

from lqpi.model import TimeGrid, builtin_scenario
from lqpi.simulate import sample_ensemble


@pytest.fixture(scope="session")
def section5():
    return builtin_scenario("section5")


@pytest.fixture(scope="session")
def psd_scalar():
    return builtin_scenario("psd_scalar")


@pytest.fixture(scope="session")
def small_grid():
    return TimeGrid(0.0, 1.0, 200)


@pytest.fixture(scope="session")
def small_ensemble(small_grid):
    return sample_ensemble(small_grid, 2000, 7)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number].splitlines()[0])
