import numpy as np
import pytest

from semiode.basis import centered_basis
from semiode.model import FitConfig
from semiode.sim import TRUTH_KNOTS, SimConfig, simulate


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running study replication")


_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance():
    return _ACCEPTANCE


def make_sim(seed=0, **kw):
    """A simulated data set with its identified truth (mean-zero θ)."""
    opts = dict(n=4, N=4, m_lo=5, m_hi=10, a_known=True)
    opts.update(kw)
    s = simulate(SimConfig(seed=seed, **opts))
    return s.data, s.truth.identified(), s.basis, s


NO_PENALTY = FitConfig(lambda1=0.0, lambda2=0.0, adaptive_nr=False)


@pytest.fixture(scope="session")
def truth_basis():
    return centered_basis(TRUTH_KNOTS)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
