"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Selected automatically when the extension is not built, or when
``SEQLAP_PURE_PYTHON`` is set in the environment.
"""

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


def _quad_upper(chol, diff):
    # ||L^T diff||^2 row-wise; diff is (n, d), chol is lower (d, d)
    proj = diff @ chol
    return np.einsum("ij,ij->i", proj, proj)


def component_logpdf(points, means, chols, log_norms):
    """Per-component log densities, shape (n, m)."""
    n, m = points.shape[0], means.shape[0]
    out = np.empty((n, m))
    for c in range(m):
        out[:, c] = log_norms[c] - 0.5 * _quad_upper(chols[c], points - means[c])
    return out


def mixture_logpdf(points, means, chols, log_norms):
    """log-sum-exp over components of :func:`component_logpdf`, shape (n,)."""
    vals = component_logpdf(points, means, chols, log_norms)
    with np.errstate(invalid="ignore"):
        out = logsumexp(vals, axis=1)
    out[np.all(vals == -np.inf, axis=1)] = -np.inf
    return out


def predictive_logpdf_scalar(x, phi, a, qu, log_coef, mu_phi, chol_phi, qxx, base_x, gain):
    """One-step prediction density of a scalar-state mixture filter."""
    n, m = x.shape[0], log_coef.shape[0]
    ok = (qu > 0.0) & np.isfinite(a) & np.isfinite(x)
    qs = np.where(ok, qu, 1.0)
    a_s = np.where(ok, a, 0.0)
    x_s = np.where(ok, x, 0.0)
    head = -0.5 * LOG_2PI
    vals = np.empty((n, m))
    for c in range(m):
        diff = phi - mu_phi[c]
        mcond = base_x[c] - diff @ gain[c]
        # qxx * Var(x_t | phi) = a^2 + qxx / qu, formed without cancellation
        v1 = a_s * a_s + qxx[c] / qs
        r = x_s - a_s * mcond
        with np.errstate(divide="ignore", invalid="ignore"):
            vals[:, c] = (log_coef[c] - 0.5 * _quad_upper(chol_phi[c], diff)
                          - 0.5 * np.log(v1) - 0.5 * qxx[c] * r * r / v1)
        vals[v1 <= 0.0, c] = -np.inf
    out = head + logsumexp(vals, axis=1)
    out[~ok] = -np.inf
    return out
