import numpy as np
import pytest

from dlis.tensor import make_rng

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def image():
    return make_rng(7).standard_normal((1, 3, 32, 32)).astype(np.float32)
