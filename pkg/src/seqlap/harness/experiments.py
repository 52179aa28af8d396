"""Experiment drivers shared by the CLI and the acceptance suite."""

import numpy as np

from .. import models
from ..iterlap import IterLapConfig
from ..population import PoolConfig, default_schedule, run_population
from ..seqfilter import CorrectionConfig, run_filter
from .liuwest import LiuWestConfig, liu_west_filter


def inject_outliers(y, times, std, rng):
    """Add independent N(0, std^2) draws to y at the given 1-based times."""
    y = np.array(y, dtype=float)
    idx = np.asarray(sorted(times), dtype=int)
    if idx.size == 0:
        return y
    if idx.min() < 1 or idx.max() > len(y):
        raise ValueError(f"outlier times must lie in 1..{len(y)}, got {idx.min()}..{idx.max()}")
    y[idx - 1] += std * rng.standard_normal(idx.size)
    return y


def parse_outliers(spec):
    """``"21,22,23:30"`` -> ((21, 22, 23), 30.0)."""
    try:
        times, std = spec.split(":")
        return tuple(int(t) for t in times.split(",") if t.strip()), float(std)
    except ValueError as err:
        raise ValueError(f"outliers must look like 't1,t2,t3:std', got {spec!r}") from err


def scaled_joint_trace(model, y, means, z=None, phi_final=None):
    """log p(y_{1:t}, x~_{1:t}, phi~) / t for t = 1..n.

    ``means`` are per-step marginal means of (x_t, phi); phi~ defaults to the
    parameter part of the last row. The running sum is split into its prior,
    transition and observation terms so all n values cost one pass.
    """
    y = np.asarray(y, dtype=float)
    n = len(y)
    means = np.asarray(means, dtype=float)
    dx = model.d_x
    phi = means[-1, dx:] if phi_final is None else np.asarray(phi_final, dtype=float)
    X = means[:, :dx]
    z = np.zeros(n) if z is None else np.asarray(z, dtype=float)
    Phi = np.repeat(phi[None, :], n, axis=0)
    obs = model.obs_loglik(y, X, Phi, z)
    prior = model.prior().logpdf(np.concatenate([X[0], phi]))
    trans = np.zeros(n)
    if n > 1:
        A = model.transition(phi[None, :])[0]
        Qu = model.innovation_precision(phi[None, :])[0]
        L = np.linalg.cholesky(Qu)
        proj = (X[1:] - X[:-1] @ A.T) @ L
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        trans[1:] = 0.5 * logdet - 0.5 * dx * models.LOG_2PI - 0.5 * np.einsum("ij,ij->i", proj, proj)
    total = prior + np.cumsum(obs + trans)
    return total / np.arange(1, n + 1)


def true_joint_trace(model, sim):
    """Reference series at the simulation truth."""
    phi = models.phi_from_params(model, sim.true_params)
    means = np.column_stack([sim.x, np.repeat(phi[None, :], len(sim.y), axis=0)])
    return scaled_joint_trace(model, sim.y, means, sim.z, phi)


def build_model(kind="example1", obs_kind="square", prior=None, prior_preset="vague"):
    """Model factory used by configs; ``prior`` overrides with {"mean": [...], "variances": [...]}."""
    if kind == "example1":
        m = models.example1(obs_kind)
    elif kind == "example2":
        m = models.example2(prior_preset, obs_kind)
    elif kind == "linear":
        return models.LinearGaussianModel()
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    if prior is not None:
        m = models.ExampleModel(m.unknowns, obs_kind=obs_kind, prior_mean=prior["mean"],
                                prior_cov=prior["variances"])
    return m


def simulate_for(model, n, seed, params=None):
    """Simulated series for ``seed``; the data stream is independent of filter randomness."""
    return models.simulate(model, n, params or models.TRUE_PARAMS,
                           np.random.default_rng([seed, 0]), seed=seed)


def filter_rng(seed):
    return np.random.default_rng([seed, 1])


def run_algorithms(model, sim, algos, cfg=None, seed=0):
    cfg = cfg or CorrectionConfig()
    return {a: run_filter(model, sim.y, sim.z, cfg.with_(algo=a), filter_rng(seed)) for a in algos}


def outlier_experiment(model, n, seed, times=(21, 22, 23), std=30.0, cfg=None, lw_cfg=None, lw_n=None):
    """SIG and Liu-West on the same outlier-contaminated series."""
    sim = simulate_for(model, n, seed)
    y = inject_outliers(sim.y, times, std, np.random.default_rng([seed, 2]))
    sig = run_filter(model, y, sim.z, (cfg or CorrectionConfig()).with_(algo="sig"), filter_rng(seed))
    m = n if lw_n is None else min(lw_n, n)
    lw = liu_west_filter(model, y[:m], sim.z[:m], lw_cfg or LiuWestConfig(), np.random.default_rng([seed, 3]))
    return sim, y, sig, lw


def population_replication(model, n, seed, pool_cfg, algos=("sig", "sig-rsrp")):
    sim = simulate_for(model, n, seed)
    return sim, {a: run_population(model, sim.y, sim.z, a, pool_cfg, seed=[seed, 4]) for a in algos}


def example2_pool_config(n=2000, n_runs=10, m_max=1):
    """SIG-RSRP settings for the vague-prior Example 2 runs."""
    return PoolConfig(n_runs=n_runs, resample_times=default_schedule(n), temper=True,
                      threshold_variances=(0.3 ** 2, 0.3 ** 2, 0.25 ** 2, 0.25 ** 2, 0.5 ** 2),
                      filter_cfg=CorrectionConfig(algo="sig", iterlap=IterLapConfig(m_max=m_max)))
