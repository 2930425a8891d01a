import numpy as np
import pytest

from motionq.qformer import MotionQformerConfig
from motionq.rng import Rng

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_config():
    return MotionQformerConfig(D=8, N_Q=3, L=2, H=2, F=5)


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
