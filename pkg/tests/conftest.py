import numpy as np
import pytest
from scipy import stats

from seqlap.gaussmix import GaussianComponent, GaussianMixture


def random_spd(rng, d, cond=10.0):
    """SPD matrix with eigenvalues spread over [1, cond] in a random basis."""
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    lam = np.exp(rng.uniform(0.0, np.log(cond), d))
    M = (Q * lam) @ Q.T
    return 0.5 * (M + M.T)


def random_component(rng, d, log_weight=0.0):
    return GaussianComponent(rng.normal(size=d), random_spd(rng, d), log_weight)


def random_mixture(rng, d, m):
    w = rng.dirichlet(np.ones(m))
    return GaussianMixture(random_component(rng, d, np.log(wi)) for wi in w)


def dense_mixture_logpdf(mix, pts):
    """Covariance-form reference evaluator built on scipy.stats."""
    cols = [c.log_weight + stats.multivariate_normal(c.mean, np.linalg.inv(c.precision)).logpdf(pts)
            for c in mix.components]
    return np.logaddexp.reduce(np.atleast_2d(np.column_stack(cols)), axis=1)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
