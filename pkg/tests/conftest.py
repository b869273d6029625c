import numpy as np
import pytest

from fatssl.nn import he_init


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences (x is perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-6):
    """Max abs difference over the larger magnitude; ``floor`` guards gradients that are ~0."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return he_init([3, 7, 5, 4], "relu", seed=3)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES = []


def record_acceptance(number, status, detail):
    line = f"criterion {number:>2} {status}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
