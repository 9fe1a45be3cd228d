import numpy as np
import pytest

from riskctmdp.config import load_config
from riskctmdp.lyapunov import LyapunovCertificate
from riskctmdp.model import ActionSet, CTMDPModel, RateMatrix, StateSpace

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def ones(x):
    return np.ones_like(np.asarray(x, dtype=float))


def flat_certificate(c_max, alpha=1.0, rho0=1.0, M0=10.0):
    """V0 = V1 = 1: every drift check reduces to rates and costs being bounded."""
    return LyapunovCertificate(
        V0=ones, V1=ones, rho0=rho0, M0=M0, L0=c_max,
        rho1=0.5 * min(alpha, alpha**2 / rho0), rho2=0.5 * alpha, b1=0.0, M1=1.0,
    )


def rate_model(rates, cost, alpha=1.0, coords=None):
    rates = np.asarray(rates, dtype=float)
    n, k = rates.shape[:2]
    return CTMDPModel(StateSpace.finite(n, coords=coords), ActionSet.indexed(n, k), RateMatrix(rates), cost, alpha)


def random_rate_model(rng, num_states, num_actions, q_bar=2.0, c_max=1.0, alpha=1.0):
    """Conservative random rates with max exit rate exactly ``q_bar``; costs in [0, c_max]."""
    off = rng.uniform(0, 1, size=(num_states, num_actions, num_states))
    idx = np.arange(num_states)
    off[idx, :, idx] = 0.0
    off *= q_bar / off.sum(axis=2).max()
    rates = off.copy()
    rates[idx, :, idx] = -off.sum(axis=2)
    cost = rng.uniform(0, c_max, size=(num_states, num_actions))
    return rate_model(rates, cost, alpha)


@pytest.fixture(scope="session")
def two_state():
    cfg = load_config("fixture:two_state")
    return cfg.model, cfg.certificate


@pytest.fixture(scope="session")
def constant_cost():
    cfg = load_config("fixture:constant_cost")
    return cfg.model, cfg.certificate


@pytest.fixture(scope="session")
def zero_cost():
    cfg = load_config("fixture:zero_cost")
    return cfg.model, cfg.certificate


@pytest.fixture(scope="session")
def gaussian():
    cfg = load_config("fixture:gaussian")
    return cfg.model, cfg.certificate


@pytest.fixture(scope="session")
def gaussian_small():
    cfg = load_config("fixture:gaussian_small")
    return cfg.model, cfg.certificate
