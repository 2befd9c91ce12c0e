import warnings

import numpy as np
import pytest

from probspec.errors import CoverageWarning


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(autouse=True)
def _quiet_coverage():
    # steep default spectra are fine; flat test spectra trip the tail check on purpose
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CoverageWarning)
        yield


def random_half(rng, K, comps=None):
    """Random half-spectrum of a real field (real at k=0 and K/2)."""
    shape = (K // 2 + 1,) if comps is None else (K // 2 + 1, comps)
    c = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    c[[0, -1]] = c[[0, -1]].real
    return c


def brute_synthesis(full, K):
    """O(K^2) sum over modes -K/2+1..K/2 at x_j = j/K."""
    x = np.arange(K) / K
    k = np.arange(-K // 2 + 1, K // 2 + 1)
    return np.exp(2j * np.pi * np.outer(x, k)) @ full


def brute_analysis(values, K):
    x = np.arange(K) / K
    k = np.arange(-K // 2 + 1, K // 2 + 1)
    return np.exp(-2j * np.pi * np.outer(k, x)) @ values / K


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str):
    """Record one acceptance line; they are printed together at the end of the session."""
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
