import numpy as np
import pytest
from hypothesis import settings

from qstop.quantize import ClvqParams, quantize_measure
from qstop.watertank import build_watertank

settings.register_profile("qstop", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("qstop")

SMALL_CLVQ = ClvqParams(n_iterations=5000, lloyd_rounds=10, samples_per_round=20000, n_count=100000)

# lines reported by the acceptance suite, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tank():
    return build_watertank()


@pytest.fixture(scope="session")
def tank_grid(tank):
    return quantize_measure(tank.lambda_measure, 12, 3, SMALL_CLVQ, pin=tank.x0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
