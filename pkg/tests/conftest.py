import numpy as np
import pytest

from pnpcert.denoisers import LinearDenoiser, MmseDenoiser
from pnpcert.priors import GmmPrior


@pytest.fixture
def half():
    """D(v) = v/2 as the MMSE denoiser of N(0, 1) at sigma = 1."""
    return MmseDenoiser(GmmPrior.gaussian([0.0], [[1.0]]), 1.0)


@pytest.fixture
def half_linear():
    return LinearDenoiser([[0.5]])


@pytest.fixture
def bimodal():
    """{1/2 N(+2, 1), 1/2 N(-2, 1)} in 1D."""
    return GmmPrior([0.5, 0.5], [[2.0], [-2.0]], [[[1.0]], [[1.0]]])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        print(line)
        _ACCEPTANCE.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
