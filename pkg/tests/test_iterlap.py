import numpy as np
import pytest
from scipy import integrate, stats

from seqlap.gaussmix import GaussianComponent, GaussianMixture, log_density
from seqlap.iterlap import (IterLapConfig, IterLapError, TargetDensity, build, fit_weights,
                            laplace_component, residual_mode)

from .conftest import random_spd


def gaussian_target(mu, cov):
    dist = stats.multivariate_normal(mu, cov)
    return TargetDensity(lambda p: np.atleast_1d(dist.logpdf(p)), len(mu))


def log_gamma_target(shape=3.0):
    # density of log X for X ~ Gamma(shape, 1): exp(shape x - e^x) / Gamma(shape)
    return TargetDensity(lambda p: shape * p[:, 0] - np.exp(p[:, 0]), 1)


def mixture_target(weights, means, sd=1.0):
    def lq(p):
        x = p[:, 0]
        comps = [np.log(w) + stats.norm(m, sd).logpdf(x) for w, m in zip(weights, means)]
        return np.logaddexp.reduce(np.column_stack(comps), axis=1)
    return TargetDensity(lq, 1)


def normal(m, sd=1.0, w=1.0):
    return GaussianComponent([m], [[1.0 / sd ** 2]], np.log(w))


def banana(p):
    x, y = p[:, 0], p[:, 1]
    return -0.5 * x ** 2 / 4 - 0.5 * (y - 0.5 * x ** 2 + 1) ** 2


class TestLaplaceComponent:
    def test_exact_for_gaussian(self, rng):
        mu = np.array([1.0, -2.0, 0.5])
        cov = np.linalg.inv(random_spd(rng, 3))
        comp, _ = laplace_component(gaussian_target(mu, cov), np.zeros(3), IterLapConfig())
        np.testing.assert_allclose(comp.mean, mu, atol=1e-6)
        np.testing.assert_allclose(comp.precision, np.linalg.inv(cov), rtol=1e-5, atol=1e-6)

    def test_log_gamma(self):
        comp, _ = laplace_component(log_gamma_target(), np.array([0.0]), IterLapConfig())
        assert comp.mean[0] == pytest.approx(np.log(3.0), abs=1e-6)
        assert comp.precision[0, 0] == pytest.approx(3.0, rel=1e-5)

    def test_banana_mode_vs_grid(self):
        comp, _ = laplace_component(TargetDensity(banana, 2), np.array([0.7, 0.3]), IterLapConfig())
        g = np.linspace(-3, 3, 601)
        X, Y = np.meshgrid(g, g, indexing="ij")
        vals = banana(np.column_stack([X.ravel(), Y.ravel()]))
        k = np.argmax(vals)
        assert np.all(np.abs(comp.mean - [X.ravel()[k], Y.ravel()[k]]) <= g[1] - g[0])

    def test_hessian_scale(self):
        comp, _ = laplace_component(log_gamma_target(), np.array([0.0]), IterLapConfig(hessian_scale=0.5))
        assert comp.precision[0, 0] == pytest.approx(1.5, rel=1e-5)

    def test_affine_equivariance(self, rng):
        # target q(A x + b): the mode maps by A^-1 (xhat - b), the precision by A' Q A
        base = TargetDensity(lambda p: banana(p) + 0.3 * p[:, 0], 2)
        cfg = IterLapConfig(gtol=1e-9)
        c0, _ = laplace_component(base, np.array([0.5, 0.0]), cfg)
        A = np.array([[1.3, 0.4], [-0.2, 0.9]])
        b = np.array([0.5, -1.0])
        moved = TargetDensity(lambda p: base(p @ A.T + b), 2)
        start = np.linalg.solve(A, np.array([0.5, 0.0]) - b)
        c1, _ = laplace_component(moved, start, cfg)
        np.testing.assert_allclose(c1.mean, np.linalg.solve(A, c0.mean - b), atol=1e-5)
        np.testing.assert_allclose(c1.precision, A.T @ c0.precision @ A, rtol=1e-5, atol=1e-5)


class TestFitWeights:
    def test_single_exact(self):
        comp = normal(0.5, 2.0)
        pts = np.linspace(-6, 6, 50)[:, None]
        fit = fit_weights([comp], pts, comp.logpdf(pts))
        np.testing.assert_allclose(fit.weights, [1.0])

    def test_exact_two_component_recovery(self):
        target = mixture_target([0.3, 0.7], [-2.0, 2.0])
        pts = np.linspace(-6, 6, 200)[:, None]
        fit = fit_weights([normal(-2.0), normal(2.0)], pts, target(pts))
        np.testing.assert_allclose(fit.weights, [0.3, 0.7], atol=1e-6)

    def test_overcomplete_basis_not_worse(self):
        target = mixture_target([0.4, 0.6], [-1.5, 2.2], sd=1.1)
        pts = np.linspace(-7, 7, 300)[:, None]
        two = [normal(-1.5), normal(2.2)]
        five = two + [normal(0.0, 1.5), normal(-3.0, 0.8), normal(3.5, 0.8)]
        fresh = np.linspace(-6.9, 6.9, 257)[:, None]
        truth = np.exp(target(fresh))

        def err(comps):
            fit = fit_weights(comps, pts, target(pts), IterLapConfig(stop_min_weight=1e-12))
            mix = GaussianMixture(c.with_log_weight(np.log(w)) for c, w in zip(comps, fit.weights) if w > 0)
            approx = np.exp(fit.log_scale + log_density(mix, fresh))
            return np.max(np.abs(approx - truth)) / truth.max()

        assert err(five) < err(two)

    def test_kkt(self, rng):
        # NNLS optimality on the scaled problem b ~ sum_i raw_i N_i
        target = mixture_target([0.5, 0.5], [-1.0, 1.5], sd=0.9)
        comps = [normal(m, s) for m, s in zip(rng.normal(size=8) * 2, rng.uniform(0.5, 2.0, 8))]
        pts = np.linspace(-6, 6, 250)[:, None]
        lq = target(pts)
        fit = fit_weights(comps, pts, lq, IterLapConfig(stop_min_weight=1e-300))
        N = np.exp(np.column_stack([c.logpdf(pts) for c in comps]))
        b = np.exp(lq - lq.max())
        grad = N.T @ (N @ fit.raw - b)
        scale = np.linalg.norm(N, axis=0) * np.linalg.norm(b)
        active = fit.raw > 0
        assert np.any(active) and np.any(~active)
        assert np.all(np.abs(grad[active]) <= 1e-8 * scale[active])
        assert np.all(grad[~active] >= -1e-8 * scale[~active])

    def test_clipped_method(self):
        target = mixture_target([0.3, 0.7], [-2.0, 2.0])
        pts = np.linspace(-6, 6, 200)[:, None]
        fit = fit_weights([normal(-2.0), normal(2.0)], pts, target(pts), IterLapConfig(weight_method="clipped"))
        np.testing.assert_allclose(fit.weights, [0.3, 0.7], atol=1e-6)

    def test_all_infinite_target(self):
        with pytest.raises(IterLapError):
            fit_weights([normal(0.0)], np.zeros((3, 1)), np.full(3, -np.inf))


class TestResidualMode:
    def test_converged_when_exact(self):
        target = mixture_target([1.0], [0.0])
        mix = GaussianMixture([normal(0.0)])
        cand = np.linspace(-4, 4, 41)[:, None]
        res = residual_mode(target, mix, cand, log_scale=0.0)
        assert res.converged

    def test_finds_uncovered_mode(self):
        target = mixture_target([0.5, 0.5], [-3.0, 3.0])
        mix = GaussianMixture([normal(-3.0)])
        cand = np.linspace(-5, 5, 41)[:, None]
        res = residual_mode(target, mix, cand, log_scale=np.log(0.5))
        assert not res.converged
        g = np.linspace(-8, 8, 16001)[:, None]
        resid = np.exp(target(g)) - 0.5 * np.exp(log_density(mix, g))
        assert abs(res.point[0] - g[np.argmax(resid), 0]) < 0.1
        assert abs(res.point[0] - 3.0) < 0.1

    def test_escapes_from_tail_candidate(self):
        target = mixture_target([0.5, 0.5], [-3.0, 3.0])
        mix = GaussianMixture([normal(-3.0)])
        cand = np.concatenate([np.linspace(-4, -2, 20), [0.8]])[:, None]
        res = residual_mode(target, mix, cand, log_scale=np.log(0.5))
        assert abs(res.point[0] - 3.0) < 0.1


def tv_on_grid(log_p, mix, grid):
    p = np.exp(log_p(grid))
    p /= integrate.trapezoid(p, grid[:, 0])
    q = np.exp(log_density(mix, grid))
    return 0.5 * integrate.trapezoid(np.abs(p - q), grid[:, 0])


class TestBuild:
    def test_gaussian_target_one_component(self, rng):
        mu, cov = np.array([0.5, -1.0]), np.array([[1.0, 0.3], [0.3, 0.5]])
        res = build(gaussian_target(mu, cov), IterLapConfig(), np.zeros((1, 2)), rng)
        assert res.n_components == 1
        np.testing.assert_allclose(res.mixture[0].mean, mu, atol=1e-6)

    def test_skew_target_tv(self):
        target = log_gamma_target(3.0)
        grid = np.linspace(-12, 5, 6801)[:, None]
        for seed in range(3):
            res = build(target, IterLapConfig(m_max=10), np.array([[0.0], [1.0]]), np.random.default_rng(seed))
            assert 1 < res.n_components <= 10
            assert tv_on_grid(target, res.mixture, grid) < 0.05

    def test_bimodal(self):
        target = mixture_target([0.4, 0.6], [-3.0, 3.0])
        res = build(target, IterLapConfig(m_max=6), np.array([[-2.5], [0.0]]), np.random.default_rng(1))
        assert res.n_components >= 2
        grid = np.linspace(-10, 10, 4001)[:, None]
        assert tv_on_grid(target, res.mixture, grid) < 0.02

    def test_monotone_and_normalized(self):
        target = TargetDensity(banana, 2)
        res = build(target, IterLapConfig(m_max=8), np.zeros((1, 2)), np.random.default_rng(2))
        # each accepted step lowers the max residual on the grid it was fitted on
        for rec in res.iterations[1:]:
            assert rec.residual_after <= rec.residual_before
        assert res.mixture.normalized
        assert res.n_components <= 8
        for c in res.mixture:
            np.linalg.cholesky(c.precision)

    def test_deterministic(self):
        target = TargetDensity(banana, 2)
        a = build(target, IterLapConfig(m_max=5), np.zeros((1, 2)), np.random.default_rng(7))
        b = build(target, IterLapConfig(m_max=5), np.zeros((1, 2)), np.random.default_rng(7))
        assert a.n_components == b.n_components
        for ca, cb in zip(a.mixture, b.mixture):
            assert np.array_equal(ca.mean, cb.mean) and np.array_equal(ca.precision, cb.precision)

    def test_preconditioned_matches(self):
        mu, cov = np.array([100.0, -0.001]), np.diag([1e4, 1e-6])
        target = TargetDensity(lambda p: -0.5 * np.sum((p - mu) ** 2 / np.diag(cov), axis=1), 2)
        res = build(target, IterLapConfig(), mu[None, :] + [[50.0, 0.001]],
                    np.random.default_rng(0), inv_hess0=cov)
        np.testing.assert_allclose(res.mixture[0].mean, mu, rtol=1e-6, atol=1e-8)

    def test_no_finite_start(self):
        with pytest.raises(IterLapError):
            build(log_gamma_target(), IterLapConfig(), np.array([[np.nan]]), np.random.default_rng(0))

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IterLapConfig(m_max=0)
        with pytest.raises(ValueError):
            IterLapConfig(hessian_scale=0.0)
        with pytest.raises(ValueError):
            IterLapConfig(weight_method="qp")

    def test_presets(self):
        assert IterLapConfig.original().hessian_scale == 1.0
        assert IterLapConfig.modified().hessian_scale < 1.0
