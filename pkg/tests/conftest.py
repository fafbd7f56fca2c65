import numpy as np
import pytest

from smmdetect.dataio import generate_synthetic, prepare_dataset
from smmdetect.tensorcore import Rng

EPS = 1e-6
REL_TOL = 1e-4


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(analytic, numeric, floor=1e-8):
    """Norm-based relative error; the floor keeps all-zero gradients comparable."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def tiny_dataset(seed=0, subjects=3, seconds=60, rate=50, smm=0.3):
    recs = generate_synthetic(Rng(seed), subjects, seconds, rate, smm)
    return prepare_dataset(recs, window_s=1.0, step=10)


@pytest.fixture(scope="session")
def small_data():
    return tiny_dataset()


ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
