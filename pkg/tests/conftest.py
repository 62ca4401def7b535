import numpy as np
import pytest

from gwanomaly.autodiff import DiffArray


def dbl(values, requires_grad=False):
    return DiffArray(np.asarray(values, dtype=np.float64), requires_grad=requires_grad, precision="double")


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Plain numpy central differences of scalar f(ndarray); independent of the tape."""
    x = np.array(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp) - f(xm)) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
