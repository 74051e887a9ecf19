import numpy as np
import pytest

from snse.basis import build_torus_basis

ACCEPTANCE_LINES = []


def two_mode(basis, scale=1.0):
    """0.6 e_(1,0)cos + 0.8 e_(1,1)sin: a pair with nonzero nonlinear transfer."""
    f = np.zeros(basis.n)
    f[basis.mode_index(1, 0)] = 0.6 * scale
    f[basis.mode_index(1, 1, "sin")] = 0.8 * scale
    return f


@pytest.fixture(scope="session")
def basis2():
    return build_torus_basis(2)


@pytest.fixture(scope="session")
def basis3():
    return build_torus_basis(3)


@pytest.fixture(scope="session")
def basis4():
    return build_torus_basis(4)


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
