import numpy as np
import pytest

from imbalance_lab.anchors import AnchorConfig
from imbalance_lab.scenes import DatasetSpec, generate, split


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f at x (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - b| / max(|a|, |b|, floor).

    The floor sits at the finite-difference noise level (roundoff ~1e-11 / h
    for O(1) losses), so near-zero entries are not judged on noise alone.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture(scope="session")
def small_spec():
    return DatasetSpec(num_scenes=24, H=32, W=32, C=3, object_size=(6, 14), seed=7)


@pytest.fixture(scope="session")
def small_scenes(small_spec):
    return generate(small_spec)


@pytest.fixture(scope="session")
def small_split(small_scenes):
    return split(small_scenes, 5 / 6)


@pytest.fixture(scope="session")
def anchor_config():
    return AnchorConfig()


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
