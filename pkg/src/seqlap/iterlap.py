"""Iterated Laplace approximation of an unnormalized density by a Gaussian mixture.

Starting from a Laplace approximation at the best start point, components are
added one at a time at the mode of the positive residual between the target
and the current (scaled) mixture; all weights are then refit by non-negative
least squares on a grid of evaluation points.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.optimize import nnls

from .gaussmix import (LOG_2PI, GaussianComponent, GaussianMixture, SPDError, log_density,
                       nearest_spd, regularize_spd, sample)
from .optimize import OptimizationError, OptResult, fd_hessian, maximize


class IterLapError(RuntimeError):
    pass


class TargetDensity:
    """Unnormalized log-density over R^d.

    ``log_q`` maps an (n, d) array to (n,) values and returns -inf outside the
    support. ``gradient`` (x -> (d,)) and ``hessian`` (x -> (d, d)) are
    optional; finite differences are used when absent.
    """

    def __init__(self, log_q, dim, gradient=None, hessian=None):
        self.log_q = log_q
        self.dim = int(dim)
        self.gradient = gradient
        self.hessian = hessian

    @classmethod
    def from_scalar(cls, f, dim, **kw):
        """Wrap a function of a single vector."""
        def batched(points):
            return np.array([f(p) for p in np.atleast_2d(points)], dtype=float)
        return cls(batched, dim, **kw)

    def __call__(self, points):
        vals = np.asarray(self.log_q(np.atleast_2d(np.asarray(points, dtype=float))), dtype=float)
        return np.where(np.isnan(vals), -np.inf, vals)


@dataclass(frozen=True)
class IterLapConfig:
    """Knobs for the mixture construction.

    ``hessian_scale`` multiplies every Laplace precision (values below one
    widen the components). ``weight_method`` is ``"nnls"`` (active-set
    non-negative least squares) or ``"clipped"`` (unconstrained least squares
    with negative weights clipped and the rest refit). ``residual_hessian``
    chooses whether a residual component takes its curvature from the log
    residual (default, SPD-repaired) or from the log target.
    ``start_selection`` picks the first component among the Laplace fits from
    up to ``n_starts`` starts: ``"mass"`` keeps the one with the largest
    Laplace mass q(x) |Q|^-1/2, ``"value"`` the first that succeeds from the
    highest-valued start. ``max_sharpening`` bounds how much narrower (in
    standard deviations) a residual component may be than the current
    mixture; ``None`` disables the cap.
    """

    m_max: int = 30
    n_starts: int = 5
    residual_candidates: int = 200
    grid_size: int | None = None
    stop_rel_residual: float = 0.01
    stop_min_weight: float = 1e-3
    hessian_scale: float = 1.0
    max_iter: int = 200
    gtol: float = 1e-6
    fd_step: float = 1e-5
    hess_step: float = 1e-4
    weight_method: str = "nnls"
    residual_hessian: str = "residual"
    grid_offset: float = 1.5
    tail_inflation: float = 4.0
    start_selection: str = "mass"
    max_sharpening: float | None = 5.0
    precondition: bool = True

    def __post_init__(self):
        if self.m_max < 1:
            raise ValueError("m_max must be >= 1")
        if not self.hessian_scale > 0:
            raise ValueError("hessian_scale must be positive")
        for name in ("stop_rel_residual", "stop_min_weight", "gtol", "fd_step", "hess_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_method not in ("nnls", "clipped"):
            raise ValueError(f"unknown weight_method {self.weight_method!r}")
        if self.residual_hessian not in ("residual", "target"):
            raise ValueError(f"unknown residual_hessian {self.residual_hessian!r}")
        if self.start_selection not in ("mass", "value"):
            raise ValueError(f"unknown start_selection {self.start_selection!r}")

    @classmethod
    def original(cls, **kw):
        """Plain construction: unscaled Hessians, NNLS weights."""
        return cls(**kw)

    @classmethod
    def modified(cls, **kw):
        """Widened components, tighter residual stop and a denser grid."""
        base = dict(hessian_scale=0.7, stop_rel_residual=0.005,
                    residual_candidates=400, stop_min_weight=1e-4)
        base.update(kw)
        return cls(**base)

    def grid_points(self, dim):
        return self.grid_size if self.grid_size is not None else 400 * dim

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class IterationRecord:
    n_components: int
    residual_before: float
    residual_after: float
    opt_iters: int
    accepted: bool


@dataclass
class IterLapResult:
    mixture: GaussianMixture
    log_scale: float
    stop_reason: str
    iterations: list = field(default_factory=list)
    n_evals: int = 0

    @property
    def n_components(self):
        return len(self.mixture)


@dataclass
class WeightFit:
    """Non-negative weight refit; ``weights`` are normalized, zeros mark drops.

    ``raw`` holds the unnormalized weights in units of the largest target
    value on the grid, so exp(lq - max lq) ~ sum_i raw_i N_i.
    """

    weights: np.ndarray
    log_scale: float
    keep: np.ndarray
    raw: np.ndarray


@dataclass
class ResidualSearch:
    converged: bool
    point: np.ndarray | None
    rel_residual: float
    opt_iters: int = 0


def laplace_component(target, start, cfg, inv_hess0=None, objective=None):
    """Gaussian at a local maximum of the (log) objective.

    The mean is the quasi-Newton maximizer from ``start``; the precision is
    the SPD-repaired negative Hessian there, times ``cfg.hessian_scale``.
    ``objective`` defaults to the target's log-density.
    """
    f = target if objective is None else objective
    grad = target.gradient if objective is None else None
    try:
        res = maximize(f, start, grad=grad, inv_hess0=inv_hess0, gtol=cfg.gtol,
                       max_iter=cfg.max_iter, fd_step=cfg.fd_step)
    except OptimizationError as err:
        res = newton_polish(f, err.best_x, cfg)
    if objective is None and target.hessian is not None:
        H = np.asarray(target.hessian(res.x), dtype=float)
    else:
        H = fd_hessian(f, res.x, rel_step=cfg.hess_step, f0=res.f)
    if not np.all(np.isfinite(H)):
        raise IterLapError("non-finite Hessian at the located mode")
    Q = nearest_spd(-H) * cfg.hessian_scale
    comp = GaussianComponent(res.x, Q)
    return comp, res


def newton_polish(f, x0, cfg, max_iter=20):
    """Damped Newton ascent with finite-difference Hessians.

    Rescues quasi-Newton runs that stall on badly conditioned ridges. Stops
    when the Newton decrement g' Q^-1 g drops below 1e-8 (1 + |f|).
    """
    x = np.asarray(x0, dtype=float)
    n_eval = 0
    for it in range(max_iter):
        h = cfg.fd_step * (1.0 + np.abs(x))
        vals = f(np.concatenate([x[None, :], np.concatenate([x + np.diag(h), x - np.diag(h)])]))
        fx = float(vals[0])
        g = (vals[1:1 + x.size] - vals[1 + x.size:]) / (2.0 * h)
        H = fd_hessian(f, x, rel_step=cfg.hess_step, f0=fx)
        n_eval += 2 * x.size + 1 + 2 * x.size * x.size + 1
        if not (np.isfinite(fx) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            break
        Q = nearest_spd(-H)
        p = np.linalg.solve(Q, g)
        dec = float(g @ p)
        if dec <= 1e-8 * (1.0 + abs(fx)):
            return OptResult(x, fx, g, it, n_eval)
        alpha = 1.0
        for _ in range(30):
            fn = float(f((x + alpha * p)[None, :])[0])
            n_eval += 1
            if np.isfinite(fn) and fn > fx:
                break
            alpha *= 0.5
        else:
            break
        x = x + alpha * p
    raise OptimizationError("Newton polish did not converge", x, float(f(x[None, :])[0]))


def _log_residual(log_q, log_fit):
    # log(q - fit) where positive, -inf elsewhere
    out = np.full(np.shape(log_q), -np.inf)
    pos = log_q > log_fit
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out[pos] = log_q[pos] + np.log1p(-np.exp(log_fit[pos] - log_q[pos]))
    return out


def _normal_columns(components, points):
    # log N_i(points) for unweighted components, shape (n, m)
    return np.column_stack([c.logpdf(points) for c in components])


def fit_weights(components, eval_points, target_log_values, cfg=None):
    """Non-negative least-squares weights of ``components`` against the target.

    Solves min ||q - sum_i w_i N_i||^2 over the evaluation points with
    w_i >= 0, after rescaling by the largest target value. Components whose
    normalized weight falls below ``cfg.stop_min_weight`` are dropped and the
    remaining weights refit.
    """
    cfg = cfg or IterLapConfig()
    lq = np.asarray(target_log_values, dtype=float)
    finite = np.isfinite(lq)
    if not np.any(finite):
        raise IterLapError("target not finite on any evaluation point")
    pts = np.atleast_2d(eval_points)
    if pts.shape[0] < len(components):
        raise IterLapError("fewer evaluation points than components")
    ref = np.max(lq[finite])
    b = np.where(finite, np.exp(lq - ref), 0.0)
    logN = _normal_columns(components, pts)
    col_ref = np.max(logN, axis=0)
    A = np.exp(logN - col_ref)

    keep = np.ones(len(components), dtype=bool)
    while True:
        w_sc = _solve_weights(A[:, keep], b, cfg.weight_method)
        raw = np.zeros(len(components))
        # weights in units of exp(ref): b ~ sum_i raw_i N_i
        raw[keep] = w_sc * np.exp(-col_ref[keep])
        total = raw.sum()
        if not total > 0:
            raise IterLapError("all fitted weights are zero")
        small = keep & (raw / total < cfg.stop_min_weight)
        if not np.any(small):
            break
        keep &= ~small
        if not np.any(keep):
            raise IterLapError("all fitted weights below the floor")
    return WeightFit(weights=raw / total, log_scale=float(np.log(total) + ref), keep=keep, raw=raw)


def _solve_weights(A, b, method):
    if method == "nnls":
        w, _ = nnls(A, b, maxiter=50 * A.shape[1] + 100)
        return w
    w = np.linalg.lstsq(A, b, rcond=None)[0]
    pos = w > 0
    if not np.any(pos):
        return np.zeros_like(w)
    out = np.zeros_like(w)
    out[pos] = np.maximum(np.linalg.lstsq(A[:, pos], b, rcond=None)[0], 0.0)
    return out


def residual_mode(target, mix, candidates, log_scale=0.0, cfg=None, log_ref=None,
                  inv_hess0=None, stop_rel=0.0):
    """Locate the maximum of r(x) = max(q(x) - c p(x), 0), c = exp(log_scale).

    Returns a :class:`ResidualSearch`; ``converged`` is set when the residual
    is non-positive at every candidate. ``rel_residual`` is the best
    candidate residual relative to exp(log_ref) (the target maximum).
    """
    cfg = cfg or IterLapConfig()
    cand = np.atleast_2d(candidates)
    lq = target(cand)
    lfit = log_scale + log_density(mix, cand)
    lr = _log_residual(lq, lfit)
    if log_ref is None:
        log_ref = np.max(lq[np.isfinite(lq)]) if np.any(np.isfinite(lq)) else 0.0
    best = int(np.argmax(lr))
    if not np.isfinite(lr[best]):
        return ResidualSearch(True, None, 0.0)
    rel = float(np.exp(lr[best] - log_ref))
    if rel < stop_rel:
        # negligible residual everywhere probed: no ascent on numerical noise
        return ResidualSearch(True, cand[best], rel)

    def objective(points):
        q = target(points)
        return _log_residual(q, log_scale + log_density(mix, points))

    try:
        res = maximize(objective, cand[best], inv_hess0=inv_hess0, gtol=cfg.gtol,
                       max_iter=cfg.max_iter, fd_step=cfg.fd_step)
        point, iters = res.x, res.n_iter
    except OptimizationError as err:
        point, iters = err.best_x, cfg.max_iter
    return ResidualSearch(False, np.asarray(point), rel, iters)


def _residual_component(target, point, mix, log_scale, cfg):
    def objective(points):
        return _log_residual(target(points), log_scale + log_density(mix, points))

    H = None
    if cfg.residual_hessian == "residual":
        H = fd_hessian(objective, point, rel_step=cfg.hess_step)
        if not np.all(np.isfinite(H)):
            H = None
    if H is None:
        H = fd_hessian(target, point, rel_step=cfg.hess_step)
    if not np.all(np.isfinite(H)):
        raise IterLapError("non-finite Hessian at residual mode")
    Q = cap_sharpness(nearest_spd(-H), mix.covariance(), cfg.max_sharpening)
    return GaussianComponent(point, Q * cfg.hessian_scale)


def cap_sharpness(Q, ref_cov, max_ratio):
    """Limit how much narrower than ``ref_cov`` the Gaussian with precision Q may be.

    Generalized eigenvalues of (Q, ref_cov^-1) are clamped at max_ratio^2, so
    no direction has a standard deviation below 1/max_ratio of the reference.
    """
    if max_ratio is None:
        return Q
    L = np.linalg.cholesky(ref_cov)
    # Q in the whitened frame of the reference: L' Q L
    W = L.T @ Q @ L
    lam, V = np.linalg.eigh(0.5 * (W + W.T))
    cap = max_ratio ** 2
    if lam[-1] <= cap:
        return Q
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    W = (V * np.minimum(lam, cap)) @ V.T
    out = Linv.T @ W @ Linv
    return 0.5 * (out + out.T)


def _weight_grid(mix, cfg, rng):
    d = mix.dim
    pts = []
    for c in mix.components:
        sd = np.sqrt(np.diag(c.covariance))
        offs = np.diag(cfg.grid_offset * sd)
        pts += [c.mean[None, :], c.mean + offs, c.mean - offs]
    fixed = np.concatenate(pts)
    n_fresh = max(cfg.grid_points(d) - fixed.shape[0], 10 * d)
    return np.concatenate([fixed, sample(mix, n_fresh, rng)])


def _candidates(mix, starts, cfg, rng):
    n = cfg.residual_candidates
    n_tail = n // 2
    wide = GaussianMixture(GaussianComponent(c.mean, c.precision / cfg.tail_inflation, c.log_weight)
                           for c in mix.components)
    return np.concatenate([sample(mix, n - n_tail, rng), sample(wide, max(n_tail, 1), rng), starts])


def _max_rel_residual(lq, lfit, log_ref):
    with np.errstate(over="ignore", invalid="ignore"):
        diff = np.abs(np.exp(lq - log_ref) - np.exp(lfit - log_ref))
    return float(np.max(np.where(np.isfinite(diff), diff, 0.0)))


def build(target, cfg, starts, rng, inv_hess0=None):
    """Iterated Laplace mixture approximation of ``target``.

    Parameters
    ----------
    target : TargetDensity
    cfg : IterLapConfig
    starts : array (k, d)
        Candidate start points; the best finite one seeds the first component.
    rng : numpy.random.Generator
    inv_hess0 : array, optional
        Covariance guess (e.g. a prior or prediction covariance). With
        ``cfg.precondition`` the whole construction runs in coordinates
        whitened by it and the mixture is mapped back afterwards.
    """
    if inv_hess0 is None or not cfg.precondition:
        return _build(target, cfg, starts, rng, inv_hess0)
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    L = np.linalg.cholesky(regularize_spd(np.asarray(inv_hess0, dtype=float))[0])
    Linv = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
    center = starts[0].copy()

    def log_q(Z):
        return target(center + Z @ L.T)

    white = TargetDensity(log_q, target.dim)
    res = _build(white, cfg, (starts - center) @ Linv.T, rng, None)
    comps = [GaussianComponent(center + L @ c.mean, Linv.T @ c.precision @ Linv, c.log_weight)
             for c in res.mixture.components]
    log_det_L = float(np.sum(np.log(np.diag(L))))
    return IterLapResult(mixture=GaussianMixture(comps), log_scale=res.log_scale + log_det_L,
                         stop_reason=res.stop_reason, iterations=res.iterations, n_evals=res.n_evals)


def _build(target, cfg, starts, rng, inv_hess0=None):
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    if starts.shape[1] != target.dim:
        raise IterLapError(f"starts have dimension {starts.shape[1]}, target {target.dim}")
    lq_starts = target(starts)
    order = [i for i in np.argsort(-lq_starts) if np.isfinite(lq_starts[i])]
    if not order:
        raise IterLapError("no start point with finite log-density")

    first, res, last_err = None, None, None
    best_mass = -np.inf
    for i in order[: max(cfg.n_starts, 1)]:
        if first is not None and cfg.start_selection == "value":
            break
        if first is not None and first.logpdf(starts[i]) > -0.5 * first.dim * LOG_2PI - 0.5 + 0.5 * first.logdet - 2.0:
            # start lies inside an already located component (within ~2 sd)
            continue
        try:
            comp, r = laplace_component(target, starts[i], cfg, inv_hess0=inv_hess0)
        except (OptimizationError, IterLapError, SPDError) as err:
            last_err = err
            continue
        mass = r.f - 0.5 * comp.logdet
        if mass > best_mass:
            first, res, best_mass = comp, r, mass
    if first is None:
        raise IterLapError(f"first Laplace approximation failed: {last_err}")

    comps = [first]
    mix = GaussianMixture(comps)
    if cfg.m_max == 1:
        # Laplace normalizer; no weight fit is needed for a single component
        log_scale = res.f + 0.5 * target.dim * LOG_2PI - 0.5 * first.logdet
        return IterLapResult(mixture=mix, log_scale=float(log_scale), stop_reason="max_components",
                             iterations=[IterationRecord(1, np.inf, np.nan, res.n_iter, True)],
                             n_evals=res.n_eval)
    grid = _weight_grid(mix, cfg, rng)
    lq_grid = target(grid)
    fit = fit_weights(comps, grid, lq_grid, cfg)
    log_scale = fit.log_scale
    log_ref = max(float(np.max(lq_grid[np.isfinite(lq_grid)])), res.f)
    iterations = [IterationRecord(1, np.inf, _max_rel_residual(lq_grid, log_scale + log_density(mix, grid), log_ref),
                                  res.n_iter, True)]
    stop = "max_components" if cfg.m_max == 1 else None

    while stop is None:
        cand = _candidates(mix, starts, cfg, rng)
        search = residual_mode(target, mix, cand, log_scale, cfg, log_ref=log_ref,
                               inv_hess0=mix.covariance(), stop_rel=cfg.stop_rel_residual)
        if search.converged or search.rel_residual < cfg.stop_rel_residual:
            stop = "converged"
            break
        try:
            new = _residual_component(target, search.point, mix, log_scale, cfg)
        except (IterLapError, SPDError):
            stop = "laplace_failed"
            break
        trial = comps + [new]
        trial_mix = GaussianMixture(trial)
        grid = np.concatenate([_weight_grid(trial_mix.normalize(), cfg, rng), search.point[None, :]])
        lq_grid = target(grid)
        log_ref = max(log_ref, float(np.max(lq_grid[np.isfinite(lq_grid)])))
        before = _max_rel_residual(lq_grid, log_scale + log_density(mix, grid), log_ref)
        try:
            tfit = fit_weights(trial, grid, lq_grid, cfg)
        except IterLapError:
            stop = "weight_fit_failed"
            break
        cand_mix = GaussianMixture(c.with_log_weight(np.log(w))
                                   for c, w, k in zip(trial, tfit.weights, tfit.keep) if k)
        after = _max_rel_residual(lq_grid, tfit.log_scale + log_density(cand_mix, grid), log_ref)
        accepted = bool(tfit.keep[-1]) and after <= before
        iterations.append(IterationRecord(len(cand_mix), before, after if accepted else before,
                                          search.opt_iters, accepted))
        if not tfit.keep[-1]:
            stop = "min_weight"
            break
        if not accepted:
            stop = "no_improvement"
            break
        comps = [c for c, k in zip(trial, tfit.keep) if k]
        mix = cand_mix
        log_scale = tfit.log_scale
        if len(comps) >= cfg.m_max:
            stop = "max_components"

    return IterLapResult(mixture=mix.normalize(), log_scale=log_scale, stop_reason=stop,
                         iterations=iterations)
