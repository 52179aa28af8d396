"""Gaussian and Gaussian-mixture algebra in precision form.

Components store the mean and the precision matrix Q together with its lower
Cholesky factor (Q = L L^T) and log|Q|. Weights are kept in log space so that
mixtures can be evaluated with log-sum-exp without underflow.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg

from . import kernels

LOG_2PI = np.log(2.0 * np.pi)

# jitter escalation for covariance estimates
JITTER_REL = 1e-10
JITTER_GROWTH = 10.0
JITTER_RETRIES = 6


class SPDError(np.linalg.LinAlgError):
    """A matrix that must be symmetric positive definite is not."""

    def __init__(self, msg, index=None):
        super().__init__(msg if index is None else f"{msg} (component {index})")
        self.index = index


class DimensionError(ValueError):
    pass


def _cholesky(Q, index=None):
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        raise SPDError("matrix is not positive definite", index) from None


def _symmetrize(M, rtol=1e-12, what="precision"):
    M = np.array(M, dtype=float, ndmin=2)
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{what} must be square, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise SPDError(f"{what} has non-finite entries")
    scale = max(np.max(np.abs(M)), np.finfo(float).tiny)
    if np.max(np.abs(M - M.T)) > rtol * scale:
        raise SPDError(f"{what} is not symmetric")
    return 0.5 * (M + M.T)


def cholesky_inverse(chol):
    """Inverse of L L^T from its lower factor."""
    inv_l = linalg.solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    return inv_l.T @ inv_l


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    """Weighted Gaussian N(mean, precision^-1) with a cached Cholesky factor.

    ``log_weight`` is log w_i. Construction fails with :class:`SPDError` if
    the precision is not symmetric positive definite, so evaluation never does.
    """

    mean: np.ndarray
    precision: np.ndarray
    log_weight: float = 0.0
    chol: np.ndarray = field(init=False, repr=False)
    logdet: float = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        Q = _symmetrize(self.precision)
        if mean.ndim != 1 or Q.shape[0] != mean.shape[0]:
            raise DimensionError(f"mean {mean.shape} does not match precision {Q.shape}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean has non-finite entries")
        lw = float(self.log_weight)
        if not np.isfinite(lw):
            raise ValueError("log_weight must be finite (weights are strictly positive)")
        L = _cholesky(Q)
        mean.setflags(write=False)
        Q.setflags(write=False)
        L.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", Q)
        object.__setattr__(self, "log_weight", lw)
        object.__setattr__(self, "chol", L)
        object.__setattr__(self, "logdet", 2.0 * float(np.sum(np.log(np.diag(L)))))

    @classmethod
    def from_covariance(cls, mean, cov, log_weight=0.0):
        cov = _symmetrize(cov, rtol=1e-10, what="covariance")
        return cls(mean, cholesky_inverse(_cholesky(cov)), log_weight)

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def weight(self):
        return float(np.exp(self.log_weight))

    @cached_property
    def covariance(self):
        return cholesky_inverse(self.chol)

    def with_log_weight(self, log_weight):
        return GaussianComponent(self.mean, self.precision, log_weight)

    def logpdf(self, points):
        """Unweighted log N(points | mean, precision^-1); points (n, d) or (d,)."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[1] != self.dim:
            raise DimensionError(f"point dimension {pts.shape[1]} != {self.dim}")
        diff = pts - self.mean
        proj = diff @ self.chol
        out = 0.5 * self.logdet - 0.5 * self.dim * LOG_2PI - 0.5 * np.einsum("ij,ij->i", proj, proj)
        return float(out[0]) if single else out


class GaussianMixture:
    """Ordered collection of weighted Gaussian components of equal dimension."""

    def __init__(self, components):
        comps = tuple(components)
        if not comps:
            raise ValueError("a mixture needs at least one component")
        d = comps[0].dim
        if any(c.dim != d for c in comps):
            raise DimensionError("all components must share one dimension")
        self.components = comps

    @classmethod
    def from_arrays(cls, log_weights, means, precisions):
        return cls(GaussianComponent(m, Q, lw) for lw, m, Q in zip(log_weights, means, precisions))

    @classmethod
    def single(cls, mean, cov):
        return cls([GaussianComponent.from_covariance(mean, cov)])

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    def __repr__(self):
        return f"GaussianMixture(m={len(self)}, d={self.dim}, normalized={self.normalized})"

    @property
    def dim(self):
        return self.components[0].dim

    @cached_property
    def log_weights(self):
        return np.array([c.log_weight for c in self.components])

    @property
    def weights(self):
        return np.exp(self.log_weights)

    @property
    def normalized(self):
        return abs(np.sum(self.weights) - 1.0) <= 1e-10

    def normalize(self):
        lw = self.log_weights
        shift = np.logaddexp.reduce(lw)
        return GaussianMixture(c.with_log_weight(c.log_weight - shift) for c in self.components)

    @cached_property
    def packed(self):
        """Contiguous (means, chols, log_norms) arrays for the batched kernels."""
        means = np.ascontiguousarray([c.mean for c in self.components])
        chols = np.ascontiguousarray([c.chol for c in self.components])
        log_norms = np.array([c.log_weight + 0.5 * c.logdet - 0.5 * c.dim * LOG_2PI
                              for c in self.components])
        return means, chols, log_norms

    def mean(self):
        w = self.weights / np.sum(self.weights)
        return w @ np.array([c.mean for c in self.components])

    def covariance(self):
        w = self.weights / np.sum(self.weights)
        mu = self.mean()
        cov = np.zeros((self.dim, self.dim))
        for wi, c in zip(w, self.components):
            dm = c.mean - mu
            cov += wi * (c.covariance + np.outer(dm, dm))
        return cov

    def marginal_moments(self):
        """Marginal means and standard deviations of every coordinate."""
        return self.mean(), np.sqrt(np.diag(self.covariance()))


def _points(mix, point):
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.ascontiguousarray(np.atleast_2d(pts))
    if pts.shape[1] != mix.dim:
        raise DimensionError(f"point dimension {pts.shape[1]} != mixture dimension {mix.dim}")
    return pts, single


def log_density(mix, point):
    """log sum_i w_i N(point | mu_i, Q_i^-1) via log-sum-exp.

    ``point`` may be a single vector (returns a float) or an (n, d) batch.
    Unnormalized mixtures give the correspondingly unnormalized log-density.
    """
    pts, single = _points(mix, point)
    out = kernels.mixture_logpdf(pts, *mix.packed)
    return float(out[0]) if single else out


def component_log_densities(mix, points):
    """Weighted per-component log densities, shape (n, m)."""
    pts, _ = _points(mix, points)
    return kernels.component_logpdf(pts, *mix.packed)


def sample(mix, n, rng):
    """Draw n i.i.d. points from a normalized mixture.

    Components are chosen by inverse CDF on the cumulative weights in stored
    order; each Gaussian draw solves L^T x = z against the precision factor.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not mix.normalized:
        raise ValueError("sampling requires a normalized mixture")
    if len(mix) == 1:
        comp = mix.components[0]
        z = rng.standard_normal((n, mix.dim))
        return comp.mean + linalg.solve_triangular(comp.chol.T, z.T, lower=False).T
    cw = np.cumsum(mix.weights)
    u = rng.random(n)
    idx = np.minimum(np.searchsorted(cw, u * cw[-1], side="right"), len(mix) - 1)
    z = rng.standard_normal((n, mix.dim))
    out = np.empty_like(z)
    for i, comp in enumerate(mix.components):
        sel = idx == i
        if np.any(sel):
            out[sel] = comp.mean + linalg.solve_triangular(comp.chol.T, z[sel].T, lower=False).T
    return out


@dataclass(frozen=True)
class BlockIndex:
    """Partition of 0..d-1 into a state block and a parameter block."""

    state_dims: tuple
    param_dims: tuple

    def __post_init__(self):
        s, p = tuple(int(i) for i in self.state_dims), tuple(int(i) for i in self.param_dims)
        if list(s) != sorted(s) or list(p) != sorted(p):
            raise ValueError("block index sets must be order-preserving")
        if set(s) & set(p):
            raise ValueError("block index sets must be disjoint")
        if sorted(s + p) != list(range(len(s) + len(p))):
            raise ValueError("block index sets must cover 0..d-1")
        object.__setattr__(self, "state_dims", s)
        object.__setattr__(self, "param_dims", p)

    @classmethod
    def leading(cls, d_state, d_param):
        return cls(tuple(range(d_state)), tuple(range(d_state, d_state + d_param)))

    @property
    def dim(self):
        return len(self.state_dims) + len(self.param_dims)


@dataclass(frozen=True, eq=False)
class ConditionalSpec:
    """Factorization N(x, phi) = N(phi | marginal) N(x | base - G (phi - mu_phi), Q_xx^-1)."""

    marginal_phi: GaussianComponent
    cond_precision: np.ndarray
    cross_gain: np.ndarray
    base_mean_x: np.ndarray
    cond_chol: np.ndarray
    log_weight: float = 0.0

    def cond_mean(self, phi):
        phi = np.asarray(phi, dtype=float)
        return self.base_mean_x - (phi - self.marginal_phi.mean) @ self.cross_gain.T

    def cond_logpdf(self, x, phi):
        """log N(x | mu_{x|phi}, Q_xx^-1), batched over rows."""
        x = np.atleast_2d(x)
        diff = x - np.atleast_2d(self.cond_mean(phi))
        proj = diff @ self.cond_chol
        dx = self.cond_precision.shape[0]
        logdet = 2.0 * np.sum(np.log(np.diag(self.cond_chol)))
        return 0.5 * logdet - 0.5 * dx * LOG_2PI - 0.5 * np.einsum("ij,ij->i", proj, proj)


def decompose(comp, block, index=None):
    """Split a joint component into a phi-marginal and an x-given-phi conditional.

    Q_phi is the Schur complement Q_pp - Q_px Q_xx^-1 Q_xp (= inverse of the
    covariance phi block), the conditional precision is Q_xx and the gain is
    G = Q_xx^-1 Q_xp.
    """
    if block.dim != comp.dim:
        raise DimensionError(f"block covers {block.dim} dims, component has {comp.dim}")
    sx, sp = list(block.state_dims), list(block.param_dims)
    Q = comp.precision
    Qxx = Q[np.ix_(sx, sx)]
    Qxp = Q[np.ix_(sx, sp)]
    Qpp = Q[np.ix_(sp, sp)]
    Lxx = _cholesky(Qxx, index)
    gain = linalg.cho_solve((Lxx, True), Qxp) if sp else np.zeros((len(sx), 0))
    q_phi = Qpp - Qxp.T @ gain
    q_phi = 0.5 * (q_phi + q_phi.T)
    marg = GaussianComponent(comp.mean[sp], q_phi) if sp else None
    return ConditionalSpec(marginal_phi=marg, cond_precision=Qxx, cross_gain=gain,
                           base_mean_x=comp.mean[sx].copy(), cond_chol=Lxx,
                           log_weight=comp.log_weight)


def marginal(mix, dims):
    """Mixture marginal over ``dims``; covariance sub-blocks re-inverted to precision."""
    dims = [int(i) for i in np.atleast_1d(dims)]
    if not dims:
        raise ValueError("dims must be non-empty")
    if len(set(dims)) != len(dims) or min(dims) < 0 or max(dims) >= mix.dim:
        raise ValueError(f"invalid index set {dims} for dimension {mix.dim}")
    if dims == list(range(mix.dim)):
        return mix
    ix = np.ix_(dims, dims)
    comps = []
    for c in mix.components:
        cov = c.covariance[ix]
        comps.append(GaussianComponent(c.mean[dims], cholesky_inverse(_cholesky(0.5 * (cov + cov.T))),
                                       c.log_weight))
    return GaussianMixture(comps)


def regularize_spd(cov):
    """Cholesky-checked copy of ``cov`` with escalating diagonal jitter.

    Jitter starts at 1e-10 * trace/d and grows tenfold for up to six retries.
    Returns (matrix, lower Cholesky factor).
    """
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    tr = np.trace(cov) / d
    jitter = JITTER_REL * (tr if tr > 0 else 1.0)
    for _ in range(JITTER_RETRIES):
        reg = cov + jitter * np.eye(d)
        try:
            return reg, np.linalg.cholesky(reg)
        except np.linalg.LinAlgError:
            jitter *= JITTER_GROWTH
    raise SPDError("degenerate point cloud: covariance not SPD after jitter cap")


def weighted_moments(points, weights):
    """Self-normalized weighted mean and (biased) covariance, SPD-repaired."""
    X = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != X.shape[0]:
        raise DimensionError("one weight per point required")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    tot = np.sum(w)
    if not tot > 0:
        raise ValueError("weights sum to zero")
    w = w / tot
    mean = w @ X
    diff = X - mean
    cov = (diff * w[:, None]).T @ diff
    cov, _ = regularize_spd(cov)
    return mean, cov


def nearest_spd(M, eps=1e-8):
    """Clamp the spectrum of symmetric M from below at eps * max(max|lambda|, 1).

    Returns the input (symmetrized) unchanged when it already satisfies the
    floor; otherwise the eigenvalue-clamped reconstruction, which is the
    Frobenius-nearest matrix with that spectral floor.
    """
    M = np.array(M, dtype=float, ndmin=2)
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite entries")
    M = 0.5 * (M + M.T)
    lam, V = np.linalg.eigh(M)
    floor = eps * max(np.max(np.abs(lam)), 1.0)
    if np.all(lam >= floor):
        return M
    lam = np.maximum(lam, floor)
    out = (V * lam) @ V.T
    return 0.5 * (out + out.T)
