"""Shared fixtures and helpers for the test suite."""
import numpy as np
import pytest

from mhis import RngStream, TargetDensity, run_chain, gaussian_rw_proposal
from mhis.problems import standard_gaussian_target

# one line per acceptance criterion, printed as a terminal summary section
# by pytest_terminal_summary below; populated by tests/test_acceptance.py
ACCEPTANCE_LINES = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES[number] = f"[{status}] criterion {number} ({title}): {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])


def make_rng(seed=0, stream=0):
    return RngStream(seed, stream).generator()


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def gauss1d_chain():
    """A moderate 1-D Gaussian chain reused by estimator tests (records kept)."""
    target = standard_gaussian_target(1)
    prop = gaussian_rw_proposal(1, 2.0)
    rng = make_rng(77)
    x0 = rng.standard_normal(1)
    return run_chain(target, prop, x0, 4000, rng, burn_in=200)


def quadratic_target(dim=2):
    """N(0, diag(1, 4, ...)) style anisotropic Gaussian with exact gradient."""
    var = 1.0 + 3.0 * np.arange(dim, dtype=float)

    def log_rho(x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.sum(x * x / var, axis=-1)

    def grad(x):
        return -np.asarray(x, dtype=float) / var

    return TargetDensity(dim, log_rho, grad, name="aniso_gauss")
