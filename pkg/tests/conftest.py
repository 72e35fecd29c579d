import numpy as np
import pytest

from lusingrad.field_core import GridDomain
from lusingrad.generators import rotational_bump
from lusingrad.scheme import Schedule, run

# Lines appended by tests/test_acceptance.py, printed once at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def unit256():
    return GridDomain.box(256)


@pytest.fixture(scope="session")
def criterion4(unit256):
    """The 6-step iteration on the rotational bump, shared by several acceptance checks."""
    v = rotational_bump(unit256)
    return v, run(v, Schedule(0.1, 0.01, 0.05, 6))


@pytest.fixture(scope="session")
def dx1_certificate():
    """Nearly exact potential for the closed, non-exact form dx1 on the 64-cell torus."""
    from lusingrad.forms import nearly_exact, sample_form, torus_atlas

    atlas = torus_atlas(64)
    omega = sample_form(lambda p: np.stack([np.ones(p.shape[:-1]), np.zeros(p.shape[:-1])], -1), atlas)
    return omega, nearly_exact(omega, atlas, 0.1)
