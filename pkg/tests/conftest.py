import numpy as np
import pytest

from feddwa import nn


def central_difference(f, x, coords, h=1e-5):
    """Central finite differences of scalar ``f`` at ``x`` along ``coords``."""
    out = np.empty(len(coords))
    for j, c in enumerate(coords):
        xp = x.copy()
        xm = x.copy()
        xp[c] += h
        xm[c] -= h
        out[j] = (f(xp) - f(xm)) / (2 * h)
    return out


def relative_error(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return nn.init_model((3, 5, 4), seed=42)


_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    _CRITERIA[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
