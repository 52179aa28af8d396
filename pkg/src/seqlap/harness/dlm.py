"""Batch iterLap on the local-level DLM posterior of (tau_u, tau_v).

The exact posterior is available on a grid through the Kalman-marginalized
likelihood, so each approximation can be scored by a grid KL divergence.
"""

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..gaussmix import GaussianMixture, log_density
from ..iterlap import IterLapConfig, IterLapError, TargetDensity, build, laplace_component
from ..models import DLMSpec, dlm_log_posterior, dlm_simulate
from ..optimize import OptimizationError

PRESETS = ("original", "modified")


def preset_config(name, m_max=30, **kw):
    if name == "original":
        return IterLapConfig.original(m_max=m_max, **kw)
    if name == "modified":
        return IterLapConfig.modified(m_max=m_max, **kw)
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


@dataclass
class GridPosterior:
    tau_u: np.ndarray
    tau_v: np.ndarray
    log_p: np.ndarray  # normalized log mass per cell, shape (len(tau_u), len(tau_v))

    @property
    def points(self):
        TU, TV = np.meshgrid(self.tau_u, self.tau_v, indexing="ij")
        return np.column_stack([TU.ravel(), TV.ravel()])


def _normalize(log_vals):
    return log_vals - logsumexp(log_vals)


def exact_grid(y, spec=DLMSpec(), n_grid=161, width=7.0, center=None, scale=None):
    """Exact posterior on a grid spanning ``width`` Laplace standard deviations each way."""
    if center is None or scale is None:
        lap = laplace_fit(y, spec)
        center = lap.mean
        scale = np.sqrt(np.diag(lap.covariance))
    tu = np.linspace(center[0] - width * scale[0], center[0] + width * scale[0], n_grid)
    tv = np.linspace(center[1] - width * scale[1], center[1] + width * scale[1], n_grid)
    grid = GridPosterior(tu, tv, None)
    grid.log_p = _normalize(dlm_log_posterior(grid.points, y, spec)).reshape(n_grid, n_grid)
    return grid


def grid_kl(grid, mix):
    """KL(exact || approximation) with both restricted to and normalized on the grid."""
    lq = _normalize(log_density(mix, grid.points)).reshape(grid.log_p.shape)
    p = np.exp(grid.log_p)
    mask = p > 0
    return float(np.sum(p[mask] * (grid.log_p[mask] - lq[mask])))


def dlm_target(y, spec=DLMSpec()):
    return TargetDensity(lambda pts: dlm_log_posterior(pts, y, spec), 2)


def dlm_starts(spec=DLMSpec(), n=5, rng=None):
    """Prior median of (tau_u, tau_v) plus draws from the Exp prior on the precisions."""
    rng = np.random.default_rng(0) if rng is None else rng
    med = np.log(spec.prior_mean_lambda * np.log(2.0))
    draws = np.log(rng.exponential(spec.prior_mean_lambda, size=(n, 2)))
    return np.vstack([[med, med], draws])


def laplace_fit(y, spec=DLMSpec(), cfg=None):
    """Single Laplace approximation from the best of the standard starts."""
    cfg = cfg or IterLapConfig(m_max=1)
    target = dlm_target(y, spec)
    starts = dlm_starts(spec)
    best = None
    for s in starts[np.argsort(-target(starts))]:
        try:
            comp, res = laplace_component(target, s, cfg)
        except (IterLapError, OptimizationError):
            continue
        if best is None or res.f > best[1]:
            best = (comp, res.f)
    if best is None:
        raise RuntimeError("no Laplace fit succeeded")
    return best[0]


@dataclass
class BatchFit:
    preset: str
    mixture: GaussianMixture
    kl: float
    stop_reason: str
    seconds: float

    @property
    def n_components(self):
        return len(self.mixture)


def fit_batch(y, presets=PRESETS, spec=DLMSpec(), m_max=30, seed=0, grid=None):
    """iterLap under each preset plus a single Laplace baseline, scored against the grid posterior."""
    grid = grid if grid is not None else exact_grid(y, spec)
    target = dlm_target(y, spec)
    out = {}
    lap = GaussianMixture([laplace_fit(y, spec).with_log_weight(0.0)])
    out["laplace"] = BatchFit("laplace", lap, grid_kl(grid, lap), "single", 0.0)
    for name in presets:
        rng = np.random.default_rng(seed)
        starts = dlm_starts(spec, rng=rng)
        t0 = time.perf_counter()
        res = build(target, preset_config(name, m_max=m_max), starts, rng)
        dt = time.perf_counter() - t0
        out[name] = BatchFit(name, res.mixture, grid_kl(grid, res.mixture), res.stop_reason, dt)
    return out


def simulate_reference(n=100, seed=1, lambda_u=0.25, lambda_v=1.0):
    return dlm_simulate(n, lambda_u, lambda_v, np.random.default_rng(seed))
