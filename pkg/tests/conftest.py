import numpy as np
import pytest

from varigrad.data import synthetic_gaussian_classes
from varigrad.tensor import RngStream


@pytest.fixture
def rng():
    return RngStream(2024, 0)


@pytest.fixture
def npr():
    # plain numpy generator for test inputs that need not be reproducible across backends
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_classes():
    return synthetic_gaussian_classes(40, 6, 3, 3.0, seed=7)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number].line())
