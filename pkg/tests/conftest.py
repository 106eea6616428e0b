import numpy as np
import pytest

from rbsample.truth import assemble_truth


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (Q * np.geomspace(1.0, cond, n)) @ Q.T


@pytest.fixture(scope="session")
def small_model():
    return assemble_truth(1 / 8, 2.0 ** -3)


@pytest.fixture(scope="session")
def rect_model():
    return assemble_truth(1 / 4, 2.0 ** -2, test_refine=1)


@pytest.fixture(scope="session")
def model16():
    return assemble_truth(1 / 16, 2.0 ** -5)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
