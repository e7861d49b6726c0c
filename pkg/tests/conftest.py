import numpy as np
import pytest

from tumorsim import _accel
from tumorsim.phantom import make_pool


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend."""
    _accel.set_backend(request.param)
    yield request.param
    _accel.set_backend(None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def pool16():
    return make_pool(3, (16, 16, 16), seed=5)


@pytest.fixture(scope="session")
def pool32():
    return make_pool(4, (32, 32, 32), seed=11)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
