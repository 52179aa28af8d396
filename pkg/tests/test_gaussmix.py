import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from seqlap import gaussmix as gm
from seqlap.gaussmix import (BlockIndex, GaussianComponent, GaussianMixture, SPDError, decompose,
                             log_density, marginal, nearest_spd, sample, weighted_moments)

from .conftest import dense_mixture_logpdf, random_component, random_mixture, random_spd

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


class TestComponent:
    def test_logdet_cache(self, rng):
        for d in (1, 3, 6):
            c = random_component(rng, d)
            assert abs(c.logdet - np.linalg.slogdet(c.precision)[1]) < 1e-10

    def test_rejects_non_spd(self):
        with pytest.raises(SPDError):
            GaussianComponent([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])

    def test_rejects_asymmetric(self):
        with pytest.raises(SPDError):
            GaussianComponent([0.0, 0.0], [[1.0, 0.1], [0.0, 1.0]])

    def test_immutable(self, rng):
        c = random_component(rng, 2)
        with pytest.raises(ValueError):
            c.mean[0] = 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(gm.DimensionError):
            GaussianComponent([0.0, 0.0, 0.0], np.eye(2))


class TestLogDensity:
    def test_standard_normal_mode(self):
        mix = GaussianMixture([GaussianComponent([0.0], [[1.0]])])
        assert log_density(mix, [0.0]) == pytest.approx(-HALF_LOG_2PI, abs=1e-14)

    def test_symmetric_pair(self):
        mix = GaussianMixture([GaussianComponent([-1.0], [[1.0]], np.log(0.5)),
                               GaussianComponent([1.0], [[1.0]], np.log(0.5))])
        assert log_density(mix, [0.0]) == pytest.approx(-0.5 - HALF_LOG_2PI, abs=1e-14)

    def test_matches_covariance_form(self, rng):
        mix = random_mixture(rng, 2, 3)
        pts = rng.normal(size=(20, 2)) * 2
        np.testing.assert_allclose(log_density(mix, pts), dense_mixture_logpdf(mix, pts), atol=1e-10)

    @pytest.mark.parametrize("d,m", [(1, 4), (3, 2), (5, 6)])
    def test_precision_vs_covariance_many(self, rng, d, m):
        mix = random_mixture(rng, d, m)
        pts = rng.normal(size=(50, d))
        np.testing.assert_allclose(log_density(mix, pts), dense_mixture_logpdf(mix, pts), atol=1e-10)

    def test_permutation_invariance(self, rng):
        mix = random_mixture(rng, 3, 5)
        perm = GaussianMixture([mix[i] for i in rng.permutation(5)])
        pts = rng.normal(size=(30, 3))
        np.testing.assert_allclose(log_density(mix, pts), log_density(perm, pts), atol=1e-10)

    def test_dimension_error(self, rng):
        with pytest.raises(gm.DimensionError):
            log_density(random_mixture(rng, 2, 2), [0.0, 0.0, 0.0])

    def test_far_tail_finite(self):
        mix = GaussianMixture([GaussianComponent([0.0], [[1.0]])])
        assert np.isfinite(log_density(mix, [1e3]))

    def test_integrates_to_one_2d(self, rng):
        mix = random_mixture(rng, 2, 3)
        g = np.linspace(-12, 12, 601)
        X, Y = np.meshgrid(g, g, indexing="ij")
        dens = np.exp(log_density(mix, np.column_stack([X.ravel(), Y.ravel()]))).reshape(X.shape)
        total = integrate.trapezoid(integrate.trapezoid(dens, g, axis=1), g)
        assert abs(total - 1.0) < 1e-3


class TestSample:
    def test_moments(self):
        mix = GaussianMixture([GaussianComponent([0.0], [[1.0]])])
        x = sample(mix, 100_000, np.random.default_rng(1))[:, 0]
        assert abs(x.mean()) < 4 / np.sqrt(x.size)
        assert abs(x.var() - 1) < 0.05

    def test_selection_frequencies(self):
        mix = GaussianMixture([GaussianComponent([-50.0], [[1.0]], np.log(0.3)),
                               GaussianComponent([50.0], [[1.0]], np.log(0.7))])
        n = 100_000
        x = sample(mix, n, np.random.default_rng(2))[:, 0]
        k = np.sum(x < 0)
        assert abs(k - 0.3 * n) < 3 * np.sqrt(n * 0.3 * 0.7)

    def test_deterministic(self, rng):
        mix = random_mixture(rng, 3, 4)
        a = sample(mix, 500, np.random.default_rng(9))
        b = sample(mix, 500, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_unnormalized_rejected(self):
        mix = GaussianMixture([GaussianComponent([0.0], [[1.0]], np.log(2.0))])
        with pytest.raises(ValueError):
            sample(mix, 10, np.random.default_rng(0))

    def test_covariance(self, rng):
        cov = np.array([[2.0, 0.8], [0.8, 1.0]])
        mix = GaussianMixture.single([1.0, -1.0], cov)
        x = sample(mix, 200_000, rng)
        np.testing.assert_allclose(np.cov(x.T), cov, atol=0.03)


def covariance_marginal(comp, dims):
    cov = np.linalg.inv(comp.precision)
    return comp.mean[dims], cov[np.ix_(dims, dims)]


class TestDecompose:
    def test_independent_blocks(self):
        Q = np.diag([2.0, 3.0, 5.0])
        spec = decompose(GaussianComponent([1.0, 2.0, 3.0], Q), BlockIndex.leading(1, 2))
        assert np.all(spec.cross_gain == 0)
        np.testing.assert_allclose(spec.marginal_phi.precision, np.diag([3.0, 5.0]))
        np.testing.assert_allclose(spec.marginal_phi.mean, [2.0, 3.0])

    def test_product_identity_correlated_2d(self, rng):
        cov = np.array([[1.0, 0.5], [0.5, 1.0]])
        comp = GaussianComponent.from_covariance([0.3, -0.2], cov)
        spec = decompose(comp, BlockIndex.leading(1, 1))
        pts = rng.normal(size=(50, 2)) * 2
        joint = comp.logpdf(pts)
        split = spec.marginal_phi.logpdf(pts[:, 1:]) + spec.cond_logpdf(pts[:, :1], pts[:, 1:])
        np.testing.assert_allclose(joint, split, atol=1e-10)

    def test_schur_marginal_matches_covariance_oracle(self, rng):
        comp = random_component(rng, 5)
        spec = decompose(comp, BlockIndex.leading(2, 3))
        _, cov_pp = covariance_marginal(comp, [2, 3, 4])
        np.testing.assert_allclose(spec.marginal_phi.precision, np.linalg.inv(cov_pp), rtol=1e-8, atol=1e-10)

    def test_cond_mean_affine(self, rng):
        spec = decompose(random_component(rng, 4), BlockIndex.leading(2, 2))
        p1, p2 = rng.normal(size=2), rng.normal(size=2)
        mid = spec.cond_mean(0.5 * (p1 + p2))
        np.testing.assert_allclose(mid, 0.5 * (spec.cond_mean(p1) + spec.cond_mean(p2)), atol=1e-12)

    def test_non_leading_block(self, rng):
        comp = random_component(rng, 3)
        spec = decompose(comp, BlockIndex((1,), (0, 2)))
        pts = rng.normal(size=(20, 3))
        joint = comp.logpdf(pts)
        split = spec.marginal_phi.logpdf(pts[:, [0, 2]]) + spec.cond_logpdf(pts[:, [1]], pts[:, [0, 2]])
        np.testing.assert_allclose(joint, split, atol=1e-10)

    def test_bad_block(self):
        with pytest.raises(ValueError):
            BlockIndex((0, 1), (1, 2))
        with pytest.raises(ValueError):
            BlockIndex((0,), (2,))


class TestProductIdentityProperty:
    """Joint = phi-marginal + conditional over many random components."""

    @settings(max_examples=120, deadline=None)
    @given(seed=st.integers(0, 2 ** 31), d=st.integers(2, 8), data=st.data())
    def test_product_identity(self, seed, d, data):
        dx = data.draw(st.integers(1, d - 1))
        r = np.random.default_rng(seed)
        comp = random_component(r, d)
        spec = decompose(comp, BlockIndex.leading(dx, d - dx))
        pts = comp.mean + r.normal(size=(5, d)) * 2
        split = spec.marginal_phi.logpdf(pts[:, dx:]) + spec.cond_logpdf(pts[:, :dx], pts[:, dx:])
        assert np.max(np.abs(comp.logpdf(pts) - split)) < 1e-9


class TestMarginal:
    def test_full_set_identity(self, rng):
        mix = random_mixture(rng, 3, 2)
        assert marginal(mix, [0, 1, 2]) is mix

    def test_product_form(self):
        comp = GaussianComponent([0.0, 1.0], np.diag([4.0, 9.0]))
        m = marginal(GaussianMixture([comp]), [1])
        np.testing.assert_allclose(m[0].precision, [[9.0]])

    def test_empty_dims(self, rng):
        with pytest.raises(ValueError):
            marginal(random_mixture(rng, 2, 1), [])

    def test_quadrature(self, rng):
        mix = random_mixture(rng, 2, 3)
        m0 = marginal(mix, [0])
        grid = np.linspace(-3, 3, 13)
        inner = np.linspace(-15, 15, 3001)
        for x in grid:
            pts = np.column_stack([np.full_like(inner, x), inner])
            q = integrate.trapezoid(np.exp(log_density(mix, pts)), inner)
            assert abs(np.exp(log_density(m0, [x])) - q) < 1e-4

    def test_composition(self, rng):
        mix = random_mixture(rng, 4, 3)
        twice = marginal(marginal(mix, [0, 2, 3]), [0, 2])
        once = marginal(mix, [0, 3])
        pts = rng.normal(size=(10, 2))
        np.testing.assert_allclose(log_density(twice, pts), log_density(once, pts), atol=1e-10)

    def test_weights_kept(self, rng):
        mix = random_mixture(rng, 3, 4)
        np.testing.assert_allclose(marginal(mix, [1]).log_weights, mix.log_weights)


class TestWeightedMoments:
    def test_uniform_weights(self, rng):
        X = rng.normal(size=(200, 3))
        m, c = weighted_moments(X, np.ones(200))
        np.testing.assert_allclose(m, X.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(c, np.cov(X.T, bias=True), atol=1e-12)

    def test_point_mass_limit(self, rng):
        X = rng.normal(size=(10, 2))
        w = np.zeros(10)
        w[3] = 1.0
        m, c = weighted_moments(X, w)
        np.testing.assert_allclose(m, X[3])
        # zero covariance is repaired by the first successful jitter level
        assert np.allclose(c, c[0, 0] * np.eye(2)) and 0 < c[0, 0] < 1e-3

    def test_importance_consistency(self):
        r = np.random.default_rng(5)
        mu, cov = np.array([1.0, -0.5]), np.array([[1.0, 0.3], [0.3, 0.5]])
        prop = stats.multivariate_normal(mu, 2.0 * cov)
        X = prop.rvs(100_000, random_state=r)
        lw = stats.multivariate_normal(mu, cov).logpdf(X) - prop.logpdf(X)
        m, c = weighted_moments(X, np.exp(lw - lw.max()))
        assert np.all(np.abs(m - mu) < 0.02 * np.maximum(np.abs(mu), 1))
        np.testing.assert_allclose(c, cov, rtol=0.05, atol=0.01)

    def test_zero_weights(self):
        with pytest.raises(ValueError):
            weighted_moments(np.ones((3, 1)), np.zeros(3))


class TestNearestSPD:
    def test_fixed_point(self, rng):
        M = random_spd(rng, 4)
        np.testing.assert_allclose(nearest_spd(M), M, atol=1e-12)

    def test_clamp(self):
        np.testing.assert_allclose(nearest_spd(np.diag([1.0, -1.0]), eps=1e-6), np.diag([1.0, 1e-6]), atol=1e-15)

    def test_eigen_oracle(self, rng):
        A = rng.normal(size=(5, 5))
        M = 0.5 * (A + A.T)
        out = nearest_spd(M, eps=1e-6)
        lam, V = np.linalg.eigh(M)
        ref = (V * np.maximum(lam, 1e-6 * max(np.abs(lam).max(), 1))) @ V.T
        np.testing.assert_allclose(out, ref, atol=1e-12)
        np.linalg.cholesky(out)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            nearest_spd(np.array([[np.nan]]))
