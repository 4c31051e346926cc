import numpy as np
import pytest

from fedproxy.model import Batch, init_model

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Per-coordinate relative error with a floor of 1e-3 * max|numeric|.

    Coordinates whose true gradient is ~0 are dominated by finite-difference
    noise; the floor keeps them from swamping the measure.
    """
    floor = max(1e-3 * float(np.max(np.abs(numeric))), 1e-12)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / den))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return init_model(n_blocks=3, width=5, input_dim=3, out_dim=2, seed=7, block_scale=1.0)


@pytest.fixture
def small_batch(rng):
    return Batch(rng.standard_normal((6, 3)), rng.standard_normal((6, 2)))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")
