import numpy as np
import pytest

from sslparsing.taxonomy import lip_taxonomy

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def lip():
    return lip_taxonomy()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.line(line)
