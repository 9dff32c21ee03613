import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "25")),
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def random_spd(n: int, rng: np.random.Generator, cond: float = 50.0) -> np.ndarray:
    """Dense SPD matrix with eigenvalues spread log-uniformly over [1, cond]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), n))
    lam[0], lam[-1] = 1.0, cond
    s = (q * lam) @ q.T
    return (s + s.T) / 2


def random_sparse(n: int, rng: np.random.Generator, density: float = 0.05) -> np.ndarray:
    mask = rng.random((n, n)) < density
    return rng.standard_normal((n, n)) * mask


def chol_inv_transpose(s: np.ndarray) -> np.ndarray:
    """Upper triangular inverse factor from the dense Cholesky factor."""
    return np.linalg.inv(np.linalg.cholesky(s)).T


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record and print one ``CRITERION k: PASS/FAIL`` line, then assert it."""
    def record(k: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
