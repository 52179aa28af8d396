"""Quasi-Newton ascent and finite-difference derivatives for batched objectives.

Objectives map an (n, d) array of points to an (n,) array of values, so a
whole finite-difference stencil costs a single call.
"""

from dataclasses import dataclass

import numpy as np


class OptimizationError(RuntimeError):
    """Ascent failed; the best iterate found so far is attached."""

    def __init__(self, msg, best_x, best_f):
        super().__init__(msg)
        self.best_x = best_x
        self.best_f = best_f


@dataclass
class OptResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    n_iter: int
    n_eval: int


def _steps(x, rel):
    return rel * (1.0 + np.abs(x))


def gradient_stencil(x, h):
    d = x.shape[0]
    E = np.diag(h)
    return np.concatenate([x + E, x - E]).reshape(2 * d, d)


def _grad_from_stencil(vals, h):
    d = h.shape[0]
    with np.errstate(invalid="ignore"):
        return (vals[:d] - vals[d:]) / (2.0 * h)


def fd_gradient(f, x, rel_step=1e-5):
    """Central-difference gradient of a batched objective at x."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel_step)
    return _grad_from_stencil(f(gradient_stencil(x, h)), h)


def fd_hessian(f, x, rel_step=1e-4, f0=None):
    """Central-difference Hessian of a batched objective, one batched call.

    Diagonal entries use the three-point second difference, off-diagonal
    entries the four-point cross difference.
    """
    x = np.asarray(x, dtype=float)
    d = x.shape[0]
    h = _steps(x, rel_step)
    pts = [x]
    for i in range(d):
        e = np.zeros(d)
        e[i] = h[i]
        pts += [x + e, x - e]
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for i, j in pairs:
        ei = np.zeros(d)
        ej = np.zeros(d)
        ei[i] = h[i]
        ej[j] = h[j]
        pts += [x + ei + ej, x + ei - ej, x - ei + ej, x - ei - ej]
    vals = f(np.array(pts))
    fx = vals[0] if f0 is None else f0
    if not np.all(np.isfinite(vals)):
        return np.full((d, d), np.nan)
    H = np.empty((d, d))
    for i in range(d):
        H[i, i] = (vals[1 + 2 * i] - 2.0 * fx + vals[2 + 2 * i]) / (h[i] * h[i])
    base = 1 + 2 * d
    for k, (i, j) in enumerate(pairs):
        pp, pm, mp, mm = vals[base + 4 * k: base + 4 * k + 4]
        H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * h[i] * h[j])
    return H


def maximize(f, x0, *, grad=None, inv_hess0=None, gtol=1e-6, max_iter=200,
             fd_step=1e-5, max_step=None, ftol=1e-12):
    """BFGS ascent with backtracking (Armijo) line search.

    Parameters
    ----------
    f : callable
        Batched objective, (n, d) -> (n,). May return -inf outside its support.
    x0 : array
        Start point with finite objective.
    grad : callable, optional
        Analytic gradient x -> (d,). Central differences otherwise.
    inv_hess0 : array, optional
        Initial inverse curvature (positive definite), e.g. a prior covariance.
    max_step : float, optional
        Cap on the Euclidean length of a single step.
    ftol : float
        Stop once the predicted ascent g' H g falls below ftol * (1 + |f|).
    """
    x = np.array(x0, dtype=float)
    d = x.shape[0]
    n_eval = 0

    def value_and_grad(pt):
        nonlocal n_eval
        if grad is not None:
            v = float(f(pt[None, :])[0])
            n_eval += 1
            g = np.asarray(grad(pt), dtype=float) if np.isfinite(v) else np.full(d, np.nan)
            return v, g
        h = _steps(pt, fd_step)
        vals = f(np.concatenate([pt[None, :], gradient_stencil(pt, h)]))
        n_eval += 2 * d + 1
        return float(vals[0]), _grad_from_stencil(vals[1:], h)

    fx, g = value_and_grad(x)
    if not np.isfinite(fx):
        raise OptimizationError("objective not finite at start point", x, fx)
    if not np.all(np.isfinite(g)):
        raise OptimizationError("gradient not finite at start point", x, fx)

    H = np.eye(d) if inv_hess0 is None else np.array(inv_hess0, dtype=float)
    scaled = inv_hess0 is not None
    for it in range(max_iter):
        if np.max(np.abs(g)) <= gtol:
            return OptResult(x, fx, g, it, n_eval)
        p = H @ g
        slope = g @ p
        if it > 0 and 0 < slope <= ftol * (1.0 + abs(fx)):
            # predicted remaining ascent is negligible (quasi-Newton decrement)
            return OptResult(x, fx, g, it, n_eval)
        if not slope > 0:
            H = np.eye(d)
            p = g.copy()
            slope = g @ p
        if max_step is not None:
            norm = np.linalg.norm(p)
            if norm > max_step:
                p *= max_step / norm
                slope = g @ p
        alpha = 1.0
        accepted = False
        for _ in range(40):
            xn = x + alpha * p
            fn, gn = value_and_grad(xn)
            if np.isfinite(fn) and np.all(np.isfinite(gn)) and fn >= fx + 1e-4 * alpha * slope:
                accepted = True
                break
            if np.isfinite(fn):
                # minimizer of the quadratic through fx, slope and fn, safeguarded
                shortfall = max(slope * alpha - (fn - fx), 1e-300)
                alpha *= min(0.5, max(0.1, 0.5 * slope * alpha / shortfall))
            else:
                alpha *= 0.25
        if not accepted:
            # stuck at the finite-difference noise floor
            if np.max(np.abs(g)) <= 1e-4 * (1.0 + abs(fx)):
                return OptResult(x, fx, g, it, n_eval)
            raise OptimizationError("line search failed", x, fx)
        s = xn - x
        y = g - gn
        sy = s @ y
        if not scaled and sy > 0:
            H = np.eye(d) * (sy / (y @ y))
            scaled = True
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
        x, fx, g = xn, fn, gn
    if np.max(np.abs(g)) <= max(gtol, 1e-4 * (1.0 + abs(fx))):
        return OptResult(x, fx, g, max_iter, n_eval)
    raise OptimizationError(f"no convergence within {max_iter} iterations", x, fx)
