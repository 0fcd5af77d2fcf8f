import numpy as np
import pytest

from align_distort.core import Instance, ProductOfMu, UtilityMixture

# lines printed by the acceptance module, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def three_alt():
    """Two user types over three alternatives, uniform pair sampling."""
    mix = UtilityMixture(np.array([0.3, 0.7]), np.array([[1.0, 0.0, 0.2], [0.0, 0.6, 0.5]]))
    return Instance(mix, 2.0, ProductOfMu(np.full(3, 1 / 3)))
