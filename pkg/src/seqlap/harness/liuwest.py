"""Auxiliary particle filter with kernel-shrinkage parameter moves (Liu-West).

Used as the particle baseline in the outlier experiment. Parameter particles
are shrunk towards their weighted mean by ``a_lw`` and jittered with variance
(1 - a_lw^2) Var, so the parameter cloud keeps its first two moments.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class LiuWestConfig:
    n_particles: int = 10_000
    a_lw: float = 0.98
    auxiliary: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("n_particles must be >= 2")
        if not 0.0 < self.a_lw <= 1.0:
            raise ValueError("a_lw must lie in (0, 1]")


@dataclass
class LiuWestTrace:
    """Weighted means/stds of (x_t, phi), shapes (n, d).

    ``unique`` counts the distinct founding particles (time-1 indices) whose
    lineages are still alive; with a_lw = 1 this is the number of distinct
    parameter values.
    """

    coord_names: tuple
    means: np.ndarray
    stds: np.ndarray
    ess: np.ndarray
    unique: np.ndarray
    status: str = "ok"

    @property
    def unique_fraction(self):
        return self.unique / self.unique[0]


def _weighted_moments(X, logw):
    w = np.exp(logw - logsumexp(logw))
    m = w @ X
    v = w @ (X - m) ** 2
    return m, np.sqrt(np.maximum(v, 0.0)), w


def _systematic(w, n, rng):
    u = (rng.random() + np.arange(n)) / n
    idx = np.searchsorted(np.cumsum(w), u)
    return np.minimum(idx, len(w) - 1)


def liu_west_filter(model, y, z=None, cfg=None, rng=None):
    """Filter (x_t, phi) with a Liu-West particle filter; the series length must be >= 1."""
    cfg = cfg or LiuWestConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty series")
    z = np.zeros(n) if z is None else np.asarray(z, dtype=float)
    N, dx, dp = cfg.n_particles, model.d_x, model.d_phi
    if dx != 1:
        raise ValueError("the particle baseline supports a scalar state only")
    a = cfg.a_lw
    h2 = 1.0 - a * a

    P = rng.multivariate_normal(model.prior_mean, model.prior_cov, size=N)
    x, phi = P[:, 0], P[:, 1:]
    founder = np.arange(N)
    d = 1 + dp
    means = np.full((n, d), np.nan)
    stds = np.full((n, d), np.nan)
    ess = np.full(n, np.nan)
    unique = np.zeros(n, dtype=int)
    status = "ok"

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        logw = model.obs_loglik(y[0], x[:, None], phi, z[0])
    for t in range(n):
        if t > 0:
            # auxiliary first stage at the shrunk parameter locations
            w = np.exp(logw - logsumexp(logw))
            if dp:
                pbar = w @ phi
                V = np.atleast_2d(np.cov(phi.T, aweights=w, bias=True))
                mloc = a * phi + (1.0 - a) * pbar
            else:
                mloc = phi
            A = model.transition_scalar(mloc)
            mu = A * x
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                look = model.obs_loglik(y[t], mu[:, None], mloc, z[t]) if cfg.auxiliary else 0.0
                g = logw + look
            if not np.any(np.isfinite(g)):
                status = f"degenerate at t={t + 1}"
                break
            k = _systematic(np.exp(g - logsumexp(g)), N, rng)
            if dp and h2 > 0:
                try:
                    Lv = np.linalg.cholesky(h2 * V + 1e-12 * np.mean(np.diag(V)) * np.eye(dp))
                except np.linalg.LinAlgError:
                    status = f"degenerate at t={t + 1}"
                    break
                phi = mloc[k] + rng.standard_normal((N, dp)) @ Lv.T
            else:
                phi = mloc[k]
            qu = model.innovation_precision_scalar(phi)
            with np.errstate(divide="ignore", invalid="ignore"):
                x = model.transition_scalar(phi) * x[k] + rng.standard_normal(N) / np.sqrt(qu)
            founder = founder[k]
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                logw = model.obs_loglik(y[t], x[:, None], phi, z[t])
                if cfg.auxiliary:
                    logw = logw - look[k]
            logw = np.where(np.isnan(logw), -np.inf, logw)
        if not np.any(np.isfinite(logw)):
            status = f"degenerate at t={t + 1}"
            break
        X = np.column_stack([x, phi])
        means[t], stds[t], w = _weighted_moments(X, logw)
        ess[t] = 1.0 / np.sum(w * w)
        unique[t] = np.unique(founder).size
    names = ("x",) + tuple(model.param_names)
    return LiuWestTrace(names, means, stds, ess, unique, status)
