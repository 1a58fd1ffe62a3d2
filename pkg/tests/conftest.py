import numpy as np
import pytest

from lowbit.calib import SyntheticSpec, generate_synthetic
from lowbit.linalg import HessianState

# one line per acceptance criterion, echoed in the terminal summary so the
# measured values survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def token_hessian(d_in, n_tokens, rho=0.9, seed=0):
    """Hessian accumulated from one synthetic activation stream."""
    X = generate_synthetic(SyntheticSpec(d_in, n_tokens, rho, seed))
    return HessianState(d_in).accumulate(X)


def random_spd(dim, seed, shift=None):
    """Well-conditioned random SPD matrix."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((dim, dim))
    return A @ A.T + (dim if shift is None else shift) * np.eye(dim)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
