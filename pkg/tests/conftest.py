import numpy as np
import pytest

from nnreach.cases import toy_network


@pytest.fixture
def toy():
    return toy_network()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# pass/fail lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
