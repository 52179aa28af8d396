"""State-space models with a linear Gaussian state equation.

    y_t ~ p(y_t | x_t, phi),    x_t = A(phi) x_{t-1} + u_t,   u_t ~ N(0, Q_u(phi)^-1)

All model callables are batched over rows of ``x`` (n, d_x) and ``phi``
(n, d_phi). The shipped models have a scalar state; the contract itself does
not assume one.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .gaussmix import GaussianComponent

LOG_2PI = math.log(2.0 * math.pi)

PARAM_ORDER = ("a", "c1", "c2", "tau_u", "tau_v")

# sigma_u* = 0.3, sigma_v* = 10 on the log-precision scale
TRUE_PARAMS = {
    "a": 0.8,
    "c1": 1.5,
    "c2": -1.0,
    "tau_u": math.log(1.0 / 0.3 ** 2),
    "tau_v": math.log(1.0 / 10.0 ** 2),
}


class StateSpaceModel:
    """Base contract. Subclasses define the observation density and A, Q_u.

    Attributes
    ----------
    d_x, d_phi : int
    param_names : tuple of str
    prior_mean, prior_cov : joint Gaussian prior over (x_1, phi)
    """

    d_x = 1
    d_phi = 0
    param_names = ()

    def __init__(self, prior_mean, prior_cov):
        self.prior_mean = np.asarray(prior_mean, dtype=float)
        self.prior_cov = np.atleast_2d(np.asarray(prior_cov, dtype=float))
        if self.prior_mean.shape != (self.dim,) or self.prior_cov.shape != (self.dim, self.dim):
            raise ValueError(f"prior must have dimension {self.dim}")

    @property
    def dim(self):
        return self.d_x + self.d_phi

    @property
    def coord_names(self):
        xs = ("x",) if self.d_x == 1 else tuple(f"x{i + 1}" for i in range(self.d_x))
        return xs + tuple(self.param_names)

    def prior(self):
        return GaussianComponent.from_covariance(self.prior_mean, self.prior_cov)

    def split(self, points):
        pts = np.atleast_2d(points)
        return pts[:, : self.d_x], pts[:, self.d_x:]

    # -- contract -------------------------------------------------------
    def transition(self, phi):
        """A(phi), shape (n, d_x, d_x)."""
        raise NotImplementedError

    def innovation_precision(self, phi):
        """Q_u(phi), shape (n, d_x, d_x)."""
        raise NotImplementedError

    def obs_loglik(self, y, x, phi, z=None):
        """log p(y | x, phi) per row, shape (n,)."""
        raise NotImplementedError

    def obs_mean(self, x, phi, z=None):
        """E[y | x, phi] per row, shape (n,)."""
        raise NotImplementedError

    # scalar-state fast path used by the compiled kernels
    def transition_scalar(self, phi):
        return self.transition(phi)[:, 0, 0]

    def innovation_precision_scalar(self, phi):
        return self.innovation_precision(phi)[:, 0, 0]


class ExampleModel(StateSpaceModel):
    """y_t = g(alpha_t) + v_t with alpha_t = max(c1 x_t + c2 z_t + 5, 0), x_t = a x_{t-1} + u_t.

    ``obs_kind`` is ``"square"`` (g = alpha^2) or ``"exp"`` (g = exp(alpha)).
    ``unknowns`` picks which of (a, c1, c2, tau_u, tau_v) are inferred; the
    rest take ``fixed`` values (defaults: the simulation truth). Precisions
    are parameterized as tau = log(lambda) = -2 log(sigma).
    """

    def __init__(self, unknowns=("a", "c1", "c2"), fixed=None, obs_kind="square",
                 prior_mean=None, prior_cov=None, sigma_z=0.5):
        if obs_kind not in ("square", "exp"):
            raise ValueError(f"obs_kind must be 'square' or 'exp', got {obs_kind!r}")
        unknowns = tuple(unknowns)
        bad = [u for u in unknowns if u not in PARAM_ORDER]
        if bad:
            raise ValueError(f"unknown parameter names {bad}")
        self.unknowns = tuple(p for p in PARAM_ORDER if p in unknowns)
        self.param_names = self.unknowns
        self.d_phi = len(self.unknowns)
        self.fixed = dict(TRUE_PARAMS)
        self.fixed.update(fixed or {})
        self.obs_kind = obs_kind
        self.sigma_z = float(sigma_z)
        if prior_mean is None:
            prior_mean = np.zeros(self.dim)
            prior_cov = np.eye(self.dim)
        super().__init__(prior_mean, np.diag(prior_cov) if np.ndim(prior_cov) == 1 else prior_cov)

    def params(self, phi):
        """Dict of all five parameters; unknowns as (n,) columns, fixed ones as floats."""
        phi = np.atleast_2d(phi)
        return {name: (phi[:, self.unknowns.index(name)] if name in self.unknowns else self.fixed[name])
                for name in PARAM_ORDER}

    def alpha(self, x, phi, z):
        p = self.params(phi)
        lin = p["c1"] * np.atleast_2d(x)[:, 0] + p["c2"] * z + 5.0
        return np.maximum(lin, 0.0)

    def obs_mean(self, x, phi, z=None):
        a = self.alpha(x, phi, 0.0 if z is None else z)
        return a * a if self.obs_kind == "square" else np.exp(a)

    def obs_loglik(self, y, x, phi, z=None):
        p = self.params(phi)
        tv = p["tau_v"]
        with np.errstate(over="ignore", invalid="ignore"):
            r = y - self.obs_mean(x, phi, z)
            out = -0.5 * LOG_2PI + 0.5 * tv - 0.5 * np.exp(tv) * r * r
        if np.shape(out) != np.shape(r):
            out = np.broadcast_to(out, np.shape(r))
        return np.where(np.isnan(out), -np.inf, out)

    def transition(self, phi):
        return self.transition_scalar(phi)[:, None, None]

    def innovation_precision(self, phi):
        return self.innovation_precision_scalar(phi)[:, None, None]

    def transition_scalar(self, phi):
        return _column(self.params(phi)["a"], np.atleast_2d(phi).shape[0])

    def innovation_precision_scalar(self, phi):
        with np.errstate(over="ignore"):
            return _column(np.exp(self.params(phi)["tau_u"]), np.atleast_2d(phi).shape[0])


def _column(v, n):
    return np.full(n, float(v)) if np.ndim(v) == 0 else np.asarray(v, dtype=float)


def example1(obs_kind="square"):
    """Unknown (a, c1, c2); sigma_u, sigma_v known; prior N((0, .5, 1, -3), diag(4, .81, 1, 1))."""
    return ExampleModel(("a", "c1", "c2"), obs_kind=obs_kind,
                        prior_mean=[0.0, 0.5, 1.0, -3.0], prior_cov=[2.0 ** 2, 0.9 ** 2, 1.0, 1.0])


def example2(prior="vague", obs_kind="square"):
    """Unknown (a, c2, tau_u, tau_v) with c1 known; informative or vague prior."""
    if prior == "informative":
        mean, var = [0.0, 0.5, 0.0, 3.0, -4.0], [2.0 ** 2, 0.9 ** 2, 1.0, 0.5 ** 2, 0.5 ** 2]
    elif prior == "vague":
        mean, var = [0.0, 0.2, 0.0, 5.0, -2.0], [2.0 ** 2, 0.9 ** 2, 1.0, 2.0 ** 2, 2.0 ** 2]
    else:
        raise ValueError(f"prior must be 'informative' or 'vague', got {prior!r}")
    return ExampleModel(("a", "c2", "tau_u", "tau_v"), obs_kind=obs_kind, prior_mean=mean, prior_cov=var)


class LinearGaussianModel(StateSpaceModel):
    """Scalar linear-Gaussian model with every parameter known (d_phi = 0).

    x_t = a x_{t-1} + u_t, y_t = h x_t + v_t, x_1 ~ N(m1, p1).
    """

    def __init__(self, a=0.9, h=1.0, sigma_u=0.5, sigma_v=1.0, m1=0.0, p1=1.0):
        self.a, self.h = float(a), float(h)
        self.sigma_u, self.sigma_v = float(sigma_u), float(sigma_v)
        super().__init__([m1], [[p1]])

    def transition(self, phi):
        return np.full((np.atleast_2d(phi).shape[0], 1, 1), self.a)

    def innovation_precision(self, phi):
        return np.full((np.atleast_2d(phi).shape[0], 1, 1), self.sigma_u ** -2)

    def obs_mean(self, x, phi, z=None):
        return self.h * np.atleast_2d(x)[:, 0]

    def obs_loglik(self, y, x, phi, z=None):
        r = y - self.obs_mean(x, phi)
        return -0.5 * LOG_2PI - math.log(self.sigma_v) - 0.5 * r * r / self.sigma_v ** 2

    def kalman(self, y):
        return kalman_filter(y, self.a, self.h, self.sigma_u ** 2, self.sigma_v ** 2,
                             self.prior_mean[0], self.prior_cov[0, 0])

    def simulate(self, n, rng):
        x = np.empty(n)
        x[0] = self.prior_mean[0] + math.sqrt(self.prior_cov[0, 0]) * rng.standard_normal()
        for t in range(1, n):
            x[t] = self.a * x[t - 1] + self.sigma_u * rng.standard_normal()
        y = self.h * x + self.sigma_v * rng.standard_normal(n)
        return SimOutput(y=y, x=x, z=np.zeros(n), true_params={}, seed=None)


# -- Kalman filter oracle ----------------------------------------------------

@dataclass
class KalmanResult:
    means: np.ndarray
    variances: np.ndarray
    pred_means: np.ndarray
    pred_variances: np.ndarray
    loglik: np.ndarray


def kalman_filter(y, a, h, q_var, r_var, m1, p1):
    """Scalar Kalman filter, broadcast over parameter arrays.

    ``a, h, q_var, r_var, m1, p1`` may be scalars or arrays of one common
    shape; the log-likelihood is the prediction-error decomposition, with
    x_1 ~ N(m1, p1) predicting the first observation.
    """
    y = np.asarray(y, dtype=float)
    a, h, q_var, r_var, m1, p1 = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                                       for v in (a, h, q_var, r_var, m1, p1)))
    shape = a.shape
    n = y.shape[0]
    means = np.empty((n,) + shape)
    vars_ = np.empty((n,) + shape)
    pmeans = np.empty((n,) + shape)
    pvars = np.empty((n,) + shape)
    ll = np.zeros(shape)
    m, p = m1.copy(), p1.copy()
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for t in range(n):
            if t > 0:
                m = a * m
                p = a * a * p + q_var
            pmeans[t], pvars[t] = m, p
            s = h * h * p + r_var
            e = y[t] - h * m
            ll = ll - 0.5 * (LOG_2PI + np.log(s) + e * e / s)
            k = p * h / s
            m = m + k * e
            p = (1.0 - k * h) * p
            means[t], vars_[t] = m, p
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    return KalmanResult(means, vars_, pmeans, pvars, ll)


# -- the local-level DLM with unknown precisions -------------------------------

@dataclass(frozen=True)
class DLMSpec:
    """y_t = x_t + v_t, x_t = x_{t-1} + u_t; Exp(mean) priors on both precisions."""

    prior_mean_lambda: float = 2.0
    x1_mean: float = 0.0
    x1_var: float = 100.0


def dlm_simulate(n, lambda_u, lambda_v, rng, x1=0.0):
    u = rng.standard_normal(n) / math.sqrt(lambda_u)
    u[0] = 0.0
    x = x1 + np.cumsum(u)
    y = x + rng.standard_normal(n) / math.sqrt(lambda_v)
    return SimOutput(y=y, x=x, z=np.zeros(n),
                     true_params={"tau_u": math.log(lambda_u), "tau_v": math.log(lambda_v)}, seed=None)


def dlm_log_posterior(points, y, spec=DLMSpec()):
    """Unnormalized log p(tau_u, tau_v | y) at (n, 2) points.

    Kalman-marginalized likelihood + log Exp prior on lambda = exp(tau) + log
    Jacobian tau. Overflowing nodes are -inf.
    """
    pts = np.atleast_2d(points)
    tu, tv = pts[:, 0], pts[:, 1]
    with np.errstate(over="ignore", invalid="ignore"):
        lam_u, lam_v = np.exp(tu), np.exp(tv)
        kf = kalman_filter(y, 1.0, 1.0, 1.0 / lam_u, 1.0 / lam_v, spec.x1_mean, spec.x1_var)
        rate = 1.0 / spec.prior_mean_lambda
        lp = (kf.loglik + 2.0 * math.log(rate) - rate * (lam_u + lam_v) + tu + tv)
    return np.where(np.isfinite(lp), lp, -np.inf)


def dlm_exact_log_posterior(y, tau_u_grid, tau_v_grid, spec=DLMSpec()):
    """Grid of unnormalized log-posterior values, shape (len(tau_u), len(tau_v))."""
    TU, TV = np.meshgrid(np.asarray(tau_u_grid, float), np.asarray(tau_v_grid, float), indexing="ij")
    vals = dlm_log_posterior(np.column_stack([TU.ravel(), TV.ravel()]), y, spec)
    return vals.reshape(TU.shape)


# -- simulation ------------------------------------------------------------------

@dataclass
class SimOutput:
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    true_params: dict = field(default_factory=dict)
    seed: int | None = None

    def __len__(self):
        return len(self.y)


def natural_to_tau(params):
    """Accept sigma_u/sigma_v or tau_u/tau_v and return the full tau-scale dict."""
    out = dict(TRUE_PARAMS)
    for k, v in params.items():
        if k == "sigma_u":
            out["tau_u"] = -2.0 * math.log(v)
        elif k == "sigma_v":
            out["tau_v"] = -2.0 * math.log(v)
        elif k in PARAM_ORDER:
            out[k] = float(v)
        else:
            raise ValueError(f"unknown parameter {k!r}")
    return out


def simulate(model, n, true_params, rng, seed=None):
    """Draw (y, x, z) of length n from an :class:`ExampleModel`.

    z_t ~ N(0, sigma_z^2) i.i.d.; x_1 from the stationary law N(0, sigma_u^2 / (1 - a^2))
    when |a| < 1 and N(0, sigma_u^2) otherwise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = natural_to_tau(true_params)
    a = p["a"]
    sigma_u = math.exp(-0.5 * p["tau_u"])
    sigma_v = math.exp(-0.5 * p["tau_v"])
    if not (sigma_u > 0 and sigma_v > 0 and model.sigma_z > 0):
        raise ValueError("standard deviations must be positive")
    z = model.sigma_z * rng.standard_normal(n)
    x = np.empty(n)
    sd1 = sigma_u / math.sqrt(1.0 - a * a) if abs(a) < 1 else sigma_u
    x[0] = sd1 * rng.standard_normal()
    eps = rng.standard_normal(n)
    for t in range(1, n):
        x[t] = a * x[t - 1] + sigma_u * eps[t]
    lin = np.maximum(p["c1"] * x + p["c2"] * z + 5.0, 0.0)
    mean = lin * lin if model.obs_kind == "square" else np.exp(lin)
    y = mean + sigma_v * rng.standard_normal(n)
    return SimOutput(y=y, x=x, z=z, true_params=p, seed=seed)


def phi_from_params(model, params):
    """Unknown-parameter vector of ``model`` from a full parameter dict."""
    p = natural_to_tau(params)
    return np.array([p[k] for k in model.param_names])


# -- joint density --------------------------------------------------------------

def joint_log_density(model, y, x, phi, z=None):
    """log p(x_1, phi) + sum_s log p(x_s | x_{s-1}, phi) + sum_s log p(y_s | x_s, phi).

    ``x`` is (t,) for scalar states or (t, d_x); ``phi`` is one parameter vector.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(x, dtype=float).reshape(len(y), model.d_x)
    phi = np.asarray(phi, dtype=float).reshape(1, model.d_phi)
    t = len(y)
    Z = np.zeros(t) if z is None else np.asarray(z, dtype=float)[:t]
    prior = model.prior()
    lp = prior.logpdf(np.concatenate([X[0], phi[0]]))
    Phi = np.repeat(phi, t, axis=0)
    lp += float(np.sum(model.obs_loglik(y, X, Phi, Z)))
    if t > 1:
        A = model.transition(phi)[0]
        Qu = model.innovation_precision(phi)[0]
        L = np.linalg.cholesky(Qu)
        resid = X[1:] - X[:-1] @ A.T
        proj = resid @ L
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        lp += float(np.sum(0.5 * logdet - 0.5 * model.d_x * LOG_2PI - 0.5 * np.einsum("ij,ij->i", proj, proj)))
    return lp


# -- non-identifiability transforms -----------------------------------------

@dataclass(frozen=True)
class NidTransform:
    """``c1_sigma_u``: (c1, sigma_u, x) -> (c1 / beta, beta sigma_u, beta x);
    ``c1_sign``: (c1, x) -> (-c1, -x)."""

    kind: str
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("c1_sigma_u", "c1_sign"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if not self.beta > 0:
            raise ValueError("beta must be positive")


def apply_nid(transform, params, x):
    """Transform a full parameter dict and a state path; other parameters untouched."""
    p = natural_to_tau(params)
    x = np.asarray(x, dtype=float)
    if transform.kind == "c1_sigma_u":
        b = transform.beta
        p["c1"] = p["c1"] / b
        p["tau_u"] = p["tau_u"] - 2.0 * math.log(b)
        return p, b * x
    p["c1"] = -p["c1"]
    return p, -x


def state_paths(x1, a, sigma_u, eps):
    """State paths x_{1:n} from x_1 and standardized innovations eps (K, n-1)."""
    eps = np.atleast_2d(eps)
    K, m = eps.shape
    X = np.empty((K, m + 1))
    X[:, 0] = x1
    for t in range(m):
        X[:, t + 1] = a * X[:, t] + sigma_u * eps[:, t]
    return X


def mc_marginal_loglik(model, y, z, x1, params, eps):
    """Common-random-number estimate of log p(y_{1:n} | x_1, params).

    Paths are built from ``eps`` scaled by sigma_u, so transformed parameters
    reuse the same standardized innovations (u' = beta u).
    """
    p = natural_to_tau(params)
    sigma_u = math.exp(-0.5 * p["tau_u"])
    X = state_paths(x1, p["a"], sigma_u, eps)
    lin = np.maximum(p["c1"] * X + p["c2"] * z[None, :] + 5.0, 0.0)
    mean = lin * lin if model.obs_kind == "square" else np.exp(lin)
    tv = p["tau_v"]
    ll = np.sum(-0.5 * LOG_2PI + 0.5 * tv - 0.5 * math.exp(tv) * (y[None, :] - mean) ** 2, axis=1)
    mx = np.max(ll)
    return float(mx + np.log(np.mean(np.exp(ll - mx))))


# -- CSV ---------------------------------------------------------------------

def fmt(v):
    """17-significant-digit float formatting used in every CSV output."""
    return format(float(v), ".17g")


def write_sim_csv(sim, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "y", "x_true", "z"])
        for t in range(len(sim.y)):
            w.writerow([t + 1, fmt(sim.y[t]), fmt(sim.x[t]), fmt(sim.z[t])])


def read_sim_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    y = np.array([float(r["y"]) for r in rows])
    x = np.array([float(r["x_true"]) if r.get("x_true", "") != "" else np.nan for r in rows])
    z = np.array([float(r["z"]) if r.get("z", "") != "" else 0.0 for r in rows])
    return SimOutput(y=y, x=x, z=z)
