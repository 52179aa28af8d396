# cython: language_level=3
"""Compiled inner loops for batched Gaussian-mixture and predictive-density
evaluation. Mirrors :mod:`seqlap._pykernels` function for function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, INFINITY, isfinite

cnp.import_array()

cdef double LOG_2PI = 1.8378770664093453


cdef inline double _quad_upper(const double* L, const double* diff, Py_ssize_t d) noexcept nogil:
    # ||L^T diff||^2 for row-major lower-triangular L
    cdef Py_ssize_t j, k
    cdef double acc, s = 0.0
    for j in range(d):
        acc = 0.0
        for k in range(j, d):
            acc = acc + L[k * d + j] * diff[k]
        s = s + acc * acc
    return s


def component_logpdf(double[:, ::1] points, double[:, ::1] means,
                     double[:, :, ::1] chols, double[::1] log_norms):
    """Per-component log densities, shape (n, m)."""
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], m = means.shape[0]
    cdef Py_ssize_t i, c, k
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[64] diff
    if d > 64:
        raise ValueError("dimension above 64 not supported by compiled kernel")
    with nogil:
        for i in range(n):
            for c in range(m):
                for k in range(d):
                    diff[k] = points[i, k] - means[c, k]
                o[i, c] = log_norms[c] - 0.5 * _quad_upper(&chols[c, 0, 0], &diff[0], d)
    return out


def mixture_logpdf(double[:, ::1] points, double[:, ::1] means,
                   double[:, :, ::1] chols, double[::1] log_norms):
    """log-sum-exp over components of :func:`component_logpdf`, shape (n,)."""
    cdef Py_ssize_t n = points.shape[0], d = points.shape[1], m = means.shape[0]
    cdef Py_ssize_t i, c, k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[64] diff
    cdef double[256] vals
    cdef double vmax, s
    if d > 64 or m > 256:
        raise ValueError("dimension/component count beyond compiled kernel limits")
    with nogil:
        for i in range(n):
            vmax = -INFINITY
            for c in range(m):
                for k in range(d):
                    diff[k] = points[i, k] - means[c, k]
                vals[c] = log_norms[c] - 0.5 * _quad_upper(&chols[c, 0, 0], &diff[0], d)
                if vals[c] > vmax:
                    vmax = vals[c]
            if not isfinite(vmax):
                o[i] = vmax
                continue
            s = 0.0
            for c in range(m):
                s = s + exp(vals[c] - vmax)
            o[i] = vmax + log(s)
    return out


def predictive_logpdf_scalar(double[::1] x, double[:, ::1] phi, double[::1] a,
                             double[::1] qu, double[::1] log_coef,
                             double[:, ::1] mu_phi, double[:, :, ::1] chol_phi,
                             double[::1] qxx, double[::1] base_x,
                             double[:, ::1] gain):
    """One-step prediction density of a scalar-state mixture filter.

    For each point (x_t, phi) and component i the previous state is
    integrated out in closed form through x_t = a(phi) x_{t-1} + u_t.
    ``log_coef`` carries log w_i + 1/2 log|Q_phi| - p/2 log 2pi + 1/2 log q_xx.
    """
    cdef Py_ssize_t n = x.shape[0], p = phi.shape[1], m = log_coef.shape[0]
    cdef Py_ssize_t i, c, k
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef double[64] diff
    cdef double[256] vals
    cdef double vmax, s, mcond, qbar, rhs, head, ai, qi, xi
    if p > 64 or m > 256:
        raise ValueError("dimension/component count beyond compiled kernel limits")
    with nogil:
        for i in range(n):
            ai = a[i]
            qi = qu[i]
            xi = x[i]
            if not (qi > 0.0) or not isfinite(ai) or not isfinite(xi):
                o[i] = -INFINITY
                continue
            head = -0.5 * LOG_2PI
            vmax = -INFINITY
            for c in range(m):
                mcond = base_x[c]
                for k in range(p):
                    diff[k] = phi[i, k] - mu_phi[c, k]
                    mcond = mcond - gain[c, k] * diff[k]
                # qxx * Var(x_t | phi) = a^2 + qxx / qu, formed without cancellation
                qbar = ai * ai + qxx[c] / qi
                rhs = xi - ai * mcond
                if not (qbar > 0.0):
                    vals[c] = -INFINITY
                    continue
                vals[c] = (log_coef[c] - 0.5 * _quad_upper(&chol_phi[c, 0, 0], &diff[0], p)
                           - 0.5 * log(qbar) - 0.5 * qxx[c] * rhs * rhs / qbar)
                if vals[c] > vmax:
                    vmax = vals[c]
            if not isfinite(vmax):
                o[i] = -INFINITY
                continue
            s = 0.0
            for c in range(m):
                s = s + exp(vals[c] - vmax)
            o[i] = head + vmax + log(s)
    return out
