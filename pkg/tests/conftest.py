import numpy as np
import pytest

from tailq.dgp import DgpSpec, simulate


@pytest.fixture(scope="session")
def small_spec():
    return DgpSpec("limited", tau=5, seed=11)


@pytest.fixture(scope="session")
def small_ds(small_spec):
    return simulate(small_spec, 300)


@pytest.fixture(scope="session")
def tiny_spec():
    return DgpSpec.tiny(seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
