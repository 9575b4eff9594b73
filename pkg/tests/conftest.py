import numpy as np
import pytest

from handfit.toy import gen_toy_model

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def assets():
    return gen_toy_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
