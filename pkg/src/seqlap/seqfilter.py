"""Sequential inference with iterated Laplace mixtures.

A time-(t-1) mixture over (x_{t-1}, phi) is turned into an evaluatable
prediction density over (x_t, phi) by integrating the state out analytically
(the state equation is linear Gaussian). Each step then approximates

    p(y_t | x_t, phi) * p~(x_t, phi | y_{1:t-1})

with iterLap (SIBS), optionally followed by an importance-sampling correction
refit by EM (SIEM) or collapsed to one Gaussian by weighted moments (SIG).
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from . import kernels
from .gaussmix import (BlockIndex, GaussianComponent, GaussianMixture, SPDError,
                       component_log_densities, decompose, regularize_spd, sample,
                       weighted_moments)
from .iterlap import IterLapConfig, IterLapError, TargetDensity, build

LOG_2PI = math.log(2.0 * math.pi)
ALGOS = ("sibs", "siem", "sig")


class FilterError(RuntimeError):
    """A filtering step could not produce an approximation."""

    def __init__(self, msg, t=None):
        super().__init__(msg if t is None else f"t={t}: {msg}")
        self.t = t


class ImportanceError(FilterError):
    pass


class EMError(FilterError):
    pass


# -- prediction density ------------------------------------------------------------

class PredictiveDensity:
    """p~(x_t, phi | y_{1:t-1}) from a mixture over (x_{t-1}, phi).

    Each component is split into N(phi | mu_phi, Q_phi^-1) N(x_{t-1} | m(phi), Q_xx^-1);
    with x_t = A x_{t-1} + u the state integral is Gaussian, giving

        x_t | phi ~ N(A m(phi), A Q_xx^-1 A' + Q_u^-1).

    This equals the precision form built on Qbar = Q_xx + A' Q_u A but does
    not cancel large terms when Q_u is huge. Calling the object on (n, d_x + d_phi) rows returns the log-density.
    """

    def __init__(self, mix, model, t=None):
        if mix.dim != model.dim:
            raise ValueError(f"mixture dimension {mix.dim} != model dimension {model.dim}")
        self.model = model
        self.t = t
        self.d_x, self.d_phi = model.d_x, model.d_phi
        block = BlockIndex.leading(self.d_x, self.d_phi)
        self.decomposed = [(c.log_weight, decompose(c, block, index=i))
                           for i, c in enumerate(mix.components)]
        self._pack()

    def _pack(self):
        dx, dp = self.d_x, self.d_phi
        specs = [s for _, s in self.decomposed]
        m = len(specs)
        self.log_w = np.array([lw for lw, _ in self.decomposed])
        self.qxx = np.ascontiguousarray([s.cond_precision for s in specs]).reshape(m, dx, dx)
        self.base_x = np.ascontiguousarray([s.base_mean_x for s in specs]).reshape(m, dx)
        self.gain = np.ascontiguousarray([s.cross_gain for s in specs]).reshape(m, dx, dp)
        logdet_xx = np.array([2.0 * np.sum(np.log(np.diag(s.cond_chol))) for s in specs])
        if dp:
            self.mu_phi = np.ascontiguousarray([s.marginal_phi.mean for s in specs])
            self.chol_phi = np.ascontiguousarray([s.marginal_phi.chol for s in specs])
            logdet_phi = np.array([s.marginal_phi.logdet for s in specs])
        else:
            self.mu_phi = np.zeros((m, 0))
            self.chol_phi = np.zeros((m, 0, 0))
            logdet_phi = np.zeros(m)
        # per-component constant: log w + log N_phi normalizer + 1/2 log|Q_xx|
        self.log_coef = self.log_w + 0.5 * logdet_phi - 0.5 * dp * LOG_2PI + 0.5 * logdet_xx

    def __len__(self):
        return len(self.decomposed)

    def __call__(self, points):
        pts = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
        x, phi = pts[:, : self.d_x], np.ascontiguousarray(pts[:, self.d_x:])
        if self.d_x == 1:
            a = np.ascontiguousarray(self.model.transition_scalar(phi), dtype=float)
            qu = np.ascontiguousarray(self.model.innovation_precision_scalar(phi), dtype=float)
            return kernels.predictive_logpdf_scalar(
                np.ascontiguousarray(x[:, 0]), phi, a, qu, self.log_coef, self.mu_phi,
                self.chol_phi, np.ascontiguousarray(self.qxx[:, 0, 0]),
                np.ascontiguousarray(self.base_x[:, 0]), np.ascontiguousarray(self.gain[:, 0, :]))
        return self._general(x, phi)

    def _general(self, x, phi):
        # covariance form: x_t | phi ~ N(A m(phi), A Q_xx^-1 A' + Q_u^-1) per component
        n, dx = x.shape[0], self.d_x
        A = self.model.transition(phi) * np.ones((n, 1, 1))
        Qu = self.model.innovation_precision(phi) * np.ones((n, 1, 1))
        try:
            Su = np.linalg.inv(Qu)
        except np.linalg.LinAlgError:
            return np.full(n, -np.inf)
        head = -0.5 * dx * LOG_2PI
        vals = np.empty((n, len(self)))
        for c in range(len(self)):
            diff = phi - self.mu_phi[c]
            proj = diff @ self.chol_phi[c]
            mcond = self.base_x[c] - diff @ self.gain[c].T
            Sxx = np.linalg.inv(self.qxx[c])
            S = A @ Sxx @ np.swapaxes(A, 1, 2) + Su
            try:
                Ls = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as err:
                raise SPDError(f"prediction covariance not SPD for component {c}", index=c) from err
            r = x - np.einsum("nij,nj->ni", A, mcond)
            w = np.linalg.solve(Ls, r[:, :, None])[:, :, 0]
            logdet_xx = np.linalg.slogdet(self.qxx[c])[1]
            vals[:, c] = (self.log_coef[c] - 0.5 * logdet_xx - 0.5 * np.einsum("ni,ni->n", proj, proj)
                          - np.sum(np.log(np.diagonal(Ls, axis1=1, axis2=2)), axis=1)
                          - 0.5 * np.einsum("ni,ni->n", w, w))
        return head + logsumexp(vals, axis=1)

    def start_points(self):
        """Component means pushed through the state equation at each phi-mean."""
        out = np.empty((len(self), self.d_x + self.d_phi))
        for c in range(len(self)):
            phi = self.mu_phi[c]
            A = self.model.transition(phi[None, :])[0]
            out[c, : self.d_x] = A @ self.base_x[c]
            out[c, self.d_x:] = phi
        return out


def predictive_log_density(pd, x_t, phi):
    """log p~(x_t, phi | y_{1:t-1}) at one point (or rows of x_t / phi)."""
    x_t = np.atleast_2d(np.asarray(x_t, dtype=float).reshape(-1, pd.d_x))
    phi = np.asarray(phi, dtype=float).reshape(-1, pd.d_phi)
    if phi.shape[0] == 1 and x_t.shape[0] > 1:
        phi = np.repeat(phi, x_t.shape[0], axis=0)
    out = pd(np.concatenate([x_t, phi], axis=1))
    return float(out[0]) if out.shape[0] == 1 else out


def predictive_covariance(mix, model):
    """Moment-matched covariance of the prediction density (optimizer scaling)."""
    mean = mix.mean()
    cov = mix.covariance().copy()
    dx = model.d_x
    phi = mean[dx:][None, :]
    A = model.transition(phi)[0]
    Qu = model.innovation_precision(phi)[0]
    with np.errstate(over="ignore", invalid="ignore"):
        cov_xx = A @ cov[:dx, :dx] @ A.T + np.linalg.inv(Qu)
        cov_xp = A @ cov[:dx, dx:]
    if not (np.all(np.isfinite(cov_xx)) and np.all(np.isfinite(cov_xp))):
        raise SPDError("prediction covariance not finite")
    cov[:dx, :dx] = cov_xx
    cov[:dx, dx:] = cov_xp
    cov[dx:, :dx] = cov_xp.T
    return cov


# -- configuration and state --------------------------------------------------------

@dataclass(frozen=True)
class CorrectionConfig:
    """Settings of one sequential algorithm.

    ``em_tol`` defaults to 1e-6 * M_star and ``em_cov_floor`` is relative to
    the average marginal variance of the resampled points. A correction whose
    effective sample size falls below ``min_ess`` counts as failed and the
    iterLap mixture is kept, as it is when an EM component shrinks in some
    direction below ``em_collapse_ratio`` times the spread of the component
    it was initialized from.
    """

    algo: str = "sig"
    M: int = 4000
    M_star: int = 2000
    em_max_iter: int = 100
    em_tol: float | None = None
    em_cov_floor: float = 1e-8
    iterlap: IterLapConfig = field(default_factory=lambda: IterLapConfig(m_max=5))
    n_prior_starts: int = 5
    min_ess: float = 50.0
    em_collapse_ratio: float | None = 0.3

    def __post_init__(self):
        algo = self.algo.lower()
        if algo not in ALGOS:
            raise ValueError(f"algo must be one of {ALGOS}, got {self.algo!r}")
        object.__setattr__(self, "algo", algo)
        if not self.M >= self.M_star >= 2:
            raise ValueError("need M >= M_star >= 2")
        if self.em_max_iter < 1 or self.em_cov_floor <= 0:
            raise ValueError("em_max_iter >= 1 and em_cov_floor > 0 required")

    @property
    def em_tol_abs(self):
        return 1e-6 * self.M_star if self.em_tol is None else self.em_tol

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class StepDiagnostics:
    t: int
    n_components: int
    stop_reason: str
    ess: float = float("nan")
    is_failed: bool = False
    em_failed: bool = False


@dataclass(frozen=True, eq=False)
class FilterState:
    """Approximation of p(x_t, phi | y_{1:t}) plus the run's own RNG stream."""

    t: int
    mix: GaussianMixture
    rng: np.random.Generator
    diagnostics: tuple = ()

    @property
    def last(self):
        return self.diagnostics[-1] if self.diagnostics else None


def _fork_rng(rng):
    # copy so that the input state keeps its own stream untouched
    out = np.random.Generator(type(rng.bit_generator)())
    out.bit_generator.state = rng.bit_generator.state
    return out


# -- targets -------------------------------------------------------------------------

def _obs_target(model, y_t, z_t, log_prior):
    dx = model.d_x

    def log_q(points):
        x, phi = points[:, :dx], points[:, dx:]
        ll = model.obs_loglik(y_t, x, phi, z_t)
        out = np.full(points.shape[0], -np.inf)
        ok = np.isfinite(ll)
        if np.any(ok):
            out[ok] = ll[ok] + log_prior(points[ok])
        out[np.isnan(out)] = -np.inf
        return out

    return TargetDensity(log_q, model.dim)


def step_target(model, mix, y_t, z_t, t=None):
    """Unnormalized log p(y_t | x_t, phi) + log p~(x_t, phi | y_{1:t-1}) and its PredictiveDensity."""
    pd = PredictiveDensity(mix, model, t)
    return _obs_target(model, y_t, z_t, pd), pd


def initial_target(model, y_1, z_1):
    prior = GaussianMixture([model.prior()])
    return _obs_target(model, y_1, z_1, lambda pts: kernels.mixture_logpdf(pts, *prior.packed))


# -- corrections ---------------------------------------------------------------------

@dataclass
class ISResult:
    points: np.ndarray
    log_weights: np.ndarray
    ess: float

    @property
    def weights(self):
        return np.exp(self.log_weights)


def importance_correction(proposal, target_log, M, rng):
    """M draws from ``proposal`` (mixture or FilterState) with self-normalized log-weights."""
    mix = proposal.mix if isinstance(proposal, FilterState) else proposal
    pts = sample(mix, M, rng)
    lt = target_log(pts)
    lp = kernels.mixture_logpdf(np.ascontiguousarray(pts), *mix.packed)
    lw = np.where(np.isfinite(lt) & np.isfinite(lp), lt - lp, -np.inf)
    if not np.any(np.isfinite(lw)):
        raise ImportanceError("all importance weights are zero")
    lw = lw - logsumexp(lw)
    w = np.exp(lw)
    ess = float(1.0 / np.sum(w * w))
    return ISResult(pts, lw, ess)


def multinomial_resample(weights, n, rng):
    """Indices of n multinomial draws by inverse CDF on the cumulative weights."""
    cw = np.cumsum(weights)
    return np.minimum(np.searchsorted(cw, rng.random(n) * cw[-1], side="right"), len(cw) - 1)


def _em_logpdf(X, log_w, means, prec_chols, logdets):
    # (n, K) weighted log densities from precision Cholesky factors
    d = X.shape[1]
    log_norms = log_w + 0.5 * logdets - 0.5 * d * LOG_2PI
    return kernels.component_logpdf(X, means, prec_chols, np.ascontiguousarray(log_norms))


def _row_logsumexp(v):
    m = np.max(v, axis=1)
    return m + np.log(np.sum(np.exp(v - m[:, None]), axis=1))


def em_refit(points, init_mix, cfg=None):
    """Gaussian-mixture EM from ``init_mix`` keeping its component count.

    Returns (mixture, n_iter, log-likelihood trace). Covariances are floored
    by ``em_cov_floor`` times the average marginal variance of the points.
    """
    cfg = cfg or CorrectionConfig()
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(points, dtype=float)))
    n, d = X.shape
    floor = cfg.em_cov_floor * float(np.mean(np.var(X, axis=0)))
    floor = floor if floor > 0 else cfg.em_cov_floor
    init = init_mix.normalize()
    K = len(init)
    log_w = init.log_weights.copy()
    means = np.array([c.mean for c in init])
    covs = np.array([c.covariance for c in init])
    pchols = np.ascontiguousarray([c.chol for c in init])
    logdets = np.array([c.logdet for c in init])
    eye = np.eye(d)
    center = X.mean(axis=0)
    Xc = X - center
    lls = []
    for it in range(cfg.em_max_iter + 1):
        logp = _em_logpdf(X, log_w, means, pchols, logdets)
        norm = _row_logsumexp(logp)
        lls.append(float(np.sum(norm)))
        if it == cfg.em_max_iter or (it > 0 and lls[-1] - lls[-2] < cfg.em_tol_abs):
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-10 * n):
            raise EMError("component collapsed (no responsibility)")
        log_w = np.log(nk / n)
        means = np.ascontiguousarray((resp.T @ X) / nk[:, None])
        # batched M-step on centred data; per-component repair only on failure
        weighted = resp.T[:, :, None] * Xc[None, :, :]
        second = np.swapaxes(weighted, 1, 2) @ Xc / nk[:, None, None]
        mc = means - center
        covs = second - mc[:, :, None] * mc[:, None, :] + floor * eye
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        try:
            L = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError:
            L = np.empty_like(covs)
            for k in range(K):
                try:
                    covs[k], L[k] = regularize_spd(covs[k])
                except SPDError as err:
                    raise EMError(f"component {k} degenerate after repair") from err
        # the kernels want the lower Cholesky factor of the precision
        pchols = np.ascontiguousarray(np.linalg.cholesky(np.linalg.inv(covs)))
        logdets = -2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
    comps = [GaussianComponent.from_covariance(means[k], covs[k], log_w[k]) for k in range(K)]
    mix = GaussianMixture(comps).normalize()
    _check_collapse(mix, init, cfg.em_collapse_ratio)
    return mix, len(lls) - 1, np.array(lls)


def _check_collapse(mix, init_mix, ratio):
    # a component that ends up much narrower (in some direction) than the
    # component it started from has locked onto a few resampled duplicates
    if ratio is None:
        return
    for k, (c, c0) in enumerate(zip(mix.components, init_mix.components)):
        L = np.linalg.cholesky(c0.covariance)
        W = L.T @ c.precision @ L
        if np.max(np.linalg.eigvalsh(0.5 * (W + W.T))) > ratio ** -2:
            raise EMError(f"component {k} collapsed")


def _correct(il_mix, target, cfg, rng):
    """Apply the configured correction to an iterLap mixture. Returns (mix, ess, is_failed, em_failed)."""
    if cfg.algo == "sibs":
        return il_mix, float("nan"), False, False
    try:
        isr = importance_correction(il_mix, target, cfg.M, rng)
    except ImportanceError:
        return il_mix, 0.0, True, False
    if isr.ess < cfg.min_ess:
        return il_mix, isr.ess, True, False
    if cfg.algo == "sig":
        try:
            mean, cov = weighted_moments(isr.points, isr.weights)
            return GaussianMixture.single(mean, cov), isr.ess, False, False
        except (SPDError, ValueError):
            return il_mix, isr.ess, True, False
    idx = multinomial_resample(isr.weights, cfg.M_star, rng)
    try:
        em_mix, _, _ = em_refit(isr.points[idx], il_mix, cfg)
        return em_mix, isr.ess, False, False
    except EMError:
        return il_mix, isr.ess, False, True


# -- steps ------------------------------------------------------------------------------

def _iterlap(target, cfg, starts, rng, inv_hess0, t):
    try:
        return build(target, cfg.iterlap, starts, rng, inv_hess0=inv_hess0)
    except (IterLapError, SPDError, ValueError) as err:
        raise FilterError(f"iterLap failed: {err}", t) from err


def init_filter(model, y1, z1=None, cfg=None, rng=None):
    """Filtering approximation at t=1 from the prior and the first observation."""
    cfg = cfg or CorrectionConfig()
    rng = np.random.default_rng() if rng is None else _fork_rng(rng)
    target = initial_target(model, y1, z1)
    draws = rng.multivariate_normal(model.prior_mean, model.prior_cov, size=cfg.n_prior_starts)
    starts = np.vstack([model.prior_mean, draws])
    res = _iterlap(target, cfg, starts, rng, model.prior_cov, 1)
    mix, ess, isf, emf = _correct(res.mixture, target, cfg, rng)
    diag = StepDiagnostics(1, len(mix), res.stop_reason, ess, isf, emf)
    return FilterState(1, mix, rng, (diag,))


def _advance(state, model, y_t, z_t, cfg):
    rng = _fork_rng(state.rng)
    t = state.t + 1
    try:
        target, pd = step_target(model, state.mix, y_t, z_t, t)
        inv_h = predictive_covariance(state.mix, model)
    except (SPDError, np.linalg.LinAlgError) as err:
        raise FilterError(f"prediction density: {err}", t) from err
    starts = pd.start_points()
    res = _iterlap(target, cfg, starts, rng, inv_h, t)
    mix, ess, isf, emf = _correct(res.mixture, target, cfg, rng)
    _check_finite(mix, t)
    diag = StepDiagnostics(t, len(mix), res.stop_reason, ess, isf, emf)
    return FilterState(t, mix, rng, state.diagnostics + (diag,))


def _check_finite(mix, t, limit=1e100):
    # a run whose state has exploded cannot be propagated another step
    mean, sd = mix.marginal_moments()
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))) or np.max(np.abs(mean) + sd) > limit:
        raise FilterError("approximation diverged", t)


def sibs_step(state, model, y_t, z_t=None, cfg=None):
    return _advance(state, model, y_t, z_t, (cfg or CorrectionConfig()).with_(algo="sibs"))


def siem_step(state, model, y_t, z_t=None, cfg=None):
    return _advance(state, model, y_t, z_t, (cfg or CorrectionConfig()).with_(algo="siem"))


def sig_step(state, model, y_t, z_t=None, cfg=None):
    return _advance(state, model, y_t, z_t, (cfg or CorrectionConfig()).with_(algo="sig"))


def step(state, model, y_t, z_t, cfg):
    """One step of ``cfg.algo``."""
    return _advance(state, model, y_t, z_t, cfg)


# -- runner ----------------------------------------------------------------------------

@dataclass
class FilterTrace:
    """Per-step marginal means/stds of (x_t, phi) plus diagnostics."""

    algo: str
    coord_names: tuple
    means: np.ndarray
    stds: np.ndarray
    ess: np.ndarray
    n_components: np.ndarray
    final: FilterState | None = None
    status: str = "ok"

    @property
    def n(self):
        return self.means.shape[0]


def run_filter(model, y, z=None, cfg=None, rng=None, keep_states=False):
    """Filter a whole series. Stops early (status ``failed at t``) on a step failure."""
    cfg = cfg or CorrectionConfig()
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    if n == 0:
        raise ValueError("empty series")
    z = np.zeros(n) if z is None else np.asarray(z, dtype=float)
    rng = np.random.default_rng(0) if rng is None else rng
    d = model.dim
    means = np.full((n, d), np.nan)
    stds = np.full((n, d), np.nan)
    ess = np.full(n, np.nan)
    ncomp = np.zeros(n, dtype=int)
    states = []
    status = "ok"
    state = None
    for t in range(n):
        try:
            state = init_filter(model, y[0], z[0], cfg, rng) if t == 0 else step(state, model, y[t], z[t], cfg)
        except FilterError as err:
            status = f"failed at t={t + 1}: {err}"
            break
        means[t], stds[t] = state.mix.marginal_moments()
        ess[t] = state.last.ess
        ncomp[t] = len(state.mix)
        if keep_states:
            states.append(state)
    trace = FilterTrace(cfg.algo, model.coord_names, means, stds, ess, ncomp, state, status)
    if keep_states:
        trace.states = states
    return trace
