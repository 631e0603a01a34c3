import numpy as np
import pytest

from pcsmooth.basis_adapt import (
    build_nmap_features,
    fit_cdf,
    kl_check,
    mgs_orthonormalize,
    nataf_apply,
    nataf_fit,
    reexpand_hermite,
)
from pcsmooth.pce import pce_cov, pce_eval, pce_mean, total_degree_index_set


class TestEmpiricalCdf:
    def test_cdf_monotone(self, rng):
        samples = rng.standard_normal(5000)
        est = fit_cdf(samples)
        grid = np.linspace(samples.min(), samples.max(), 300)
        vals = est.cdf(grid)
        assert np.all(np.diff(vals) >= 0.0)
        assert np.all((vals >= 0.0) & (vals <= 1.0))

    def test_normal_scores_standardize_skewed_input(self, rng):
        samples = np.exp(rng.standard_normal(20_000))
        est = fit_cdf(samples)
        z = est.normal_score(samples)
        assert abs(z.mean()) < 0.02
        assert 0.95 < z.var() < 1.05

    def test_gaussian_passthrough_is_nearly_identity(self, rng):
        samples = rng.standard_normal(20_000)
        z = fit_cdf(samples).normal_score(samples)
        # on already-normal data the score map should be close to x itself
        assert np.sqrt(np.mean((z - samples) ** 2)) < 0.05

    def test_degenerate_column(self):
        est = fit_cdf(np.full(100, 2.5))
        assert est.degenerate
        z = est.normal_score(np.array([2.5, 2.5]))
        np.testing.assert_allclose(z, 0.0, atol=1e-12)


class TestKlCheck:
    def test_same_distribution_small(self, rng):
        a = rng.standard_normal(20_000)
        b = rng.standard_normal(20_000)
        assert kl_check(a, b) <= 0.01

    def test_unit_mean_shift(self, rng):
        # KL(N(0,1) || N(1,1)) = 0.5
        p = rng.standard_normal(200_000)
        q = rng.standard_normal(200_000) + 1.0
        assert kl_check(p, q) == pytest.approx(0.5, abs=0.05)

    def test_variance_mismatch(self, rng):
        # KL(N(0,1) || N(0,4)) = 0.5 (ln 4 + 1/4 - 1)
        p = rng.standard_normal(200_000)
        q = 2.0 * rng.standard_normal(200_000)
        assert kl_check(p, q) == pytest.approx(0.3181, abs=0.05)

    def test_asymmetry_direction(self, rng):
        p = rng.standard_normal(100_000)
        q = 3.0 * rng.standard_normal(100_000)
        # narrow-inside-wide is cheaper than wide-inside-narrow
        assert kl_check(p, q) < kl_check(q, p)


class TestMgs:
    def test_orthonormal_on_sample_inner_product(self, rng):
        xi = rng.standard_normal((4000, 2))
        s = total_degree_index_set(2, 3)
        raw = np.stack([xi[:, 0] ** a * xi[:, 1] ** b for a, b in s.indices], axis=1)
        q, transform, kept = mgs_orthonormalize(raw)
        gram = q.T @ q / len(xi)
        np.testing.assert_allclose(gram, np.eye(q.shape[1]), atol=1e-10)

    def test_transform_reproduces_q(self, rng):
        xi = rng.standard_normal((500, 3))
        raw = np.stack([np.ones(500), xi[:, 0], xi[:, 1], xi[:, 0] * xi[:, 1]], axis=1)
        q, transform, kept = mgs_orthonormalize(raw)
        np.testing.assert_allclose(raw[:, kept] @ transform, q, atol=1e-10)

    def test_dependent_column_dropped(self, rng):
        xi = rng.standard_normal((300, 1))
        raw = np.stack([np.ones(300), xi[:, 0], 2.0 * xi[:, 0]], axis=1)
        q, transform, kept = mgs_orthonormalize(raw)
        assert list(kept) == [0, 1]

    def test_recovers_hermite_direction(self, rng):
        # orthonormalizing [1, x, x^2] against the normal measure lands the
        # third vector on He2 / sqrt(2), up to sign
        xi = rng.standard_normal((2_000_000, 1))
        raw = np.stack([np.ones_like(xi[:, 0]), xi[:, 0], xi[:, 0] ** 2], axis=1)
        q, transform, kept = mgs_orthonormalize(raw)
        he2 = (xi[:, 0] ** 2 - 1.0) / np.sqrt(2.0)
        sign = np.sign(np.mean(q[:, 2] * he2))
        assert np.sqrt(np.mean((sign * q[:, 2] - he2) ** 2)) < 0.01


class TestNmapFeatures:
    def test_monomial_row(self):
        vals = np.array([[2.0, 3.0]])
        feats, s = build_nmap_features(vals, 2)
        row = {alpha: feats[0, i] for i, alpha in enumerate(s.indices)}
        assert row[(0, 0)] == 1.0
        assert row[(1, 0)] == 2.0
        assert row[(0, 1)] == 3.0
        assert row[(2, 0)] == 4.0
        assert row[(1, 1)] == 6.0
        assert row[(0, 2)] == 9.0

    def test_reuses_index_set(self, rng):
        vals = rng.standard_normal((10, 2))
        _, s = build_nmap_features(vals, 3)
        feats2, s2 = build_nmap_features(vals, 3, index_set=s)
        assert s2 is s


class TestNataf:
    def test_transform_standardizes(self, rng):
        n = 100_000
        base = rng.standard_normal((n, 3))
        mix = np.array([[1.0, 0.0, 0.0], [0.6, 0.8, 0.0], [0.3, 0.3, 0.9]])
        correlated = base @ mix.T
        samples = np.stack(
            [
                np.exp(correlated[:, 0]),
                correlated[:, 1] ** 3 + correlated[:, 1],
                correlated[:, 2],
            ],
            axis=1,
        )
        transform = nataf_fit(samples)
        theta = nataf_apply(transform, samples)
        assert np.max(np.abs(theta.mean(axis=0))) <= 0.02
        assert np.all((theta.var(axis=0) > 0.95) & (theta.var(axis=0) < 1.05))
        corr = np.corrcoef(theta.T)
        off = corr[~np.eye(3, dtype=bool)]
        assert np.max(np.abs(off)) <= 0.01

    def test_lognormal_marginal_becomes_normal(self, rng):
        samples = np.exp(rng.standard_normal((100_000, 1)))
        theta = nataf_apply(nataf_fit(samples), samples)[:, 0]
        # moment-based normality: skewness near 0, kurtosis near 3
        skew = np.mean(theta**3) / np.mean(theta**2) ** 1.5
        kurt = np.mean(theta**4) / np.mean(theta**2) ** 2
        assert abs(skew) < 0.05
        assert abs(kurt - 3.0) < 0.15

    def test_apply_method_matches_function(self, rng):
        samples = rng.standard_normal((5000, 2)) ** 3
        transform = nataf_fit(samples)
        np.testing.assert_array_equal(
            transform.apply(samples), nataf_apply(transform, samples)
        )

    def test_shape_validation(self, rng):
        transform = nataf_fit(rng.standard_normal((500, 2)))
        with pytest.raises(ValueError):
            nataf_apply(transform, rng.standard_normal((10, 3)))


class TestReexpandHermite:
    def test_gaussian_roundtrip(self, rng):
        theta = rng.standard_normal((4000, 2))
        a = np.array([[2.0, 0.5], [-1.0, 1.5]])
        states = theta @ a.T + np.array([1.0, -2.0])
        refit = reexpand_hermite(theta, states, 2)
        np.testing.assert_allclose(pce_mean(refit), [1.0, -2.0], atol=1e-8)
        np.testing.assert_allclose(pce_cov(refit), a @ a.T, atol=1e-6)

    def test_nonlinear_response_represented(self, rng):
        theta = rng.standard_normal((4000, 1))
        states = (theta[:, 0] ** 2)[:, None]
        refit = reexpand_hermite(theta, states, 2)
        hold = rng.standard_normal((200, 1))
        np.testing.assert_allclose(
            pce_eval(refit, hold)[:, 0], hold[:, 0] ** 2, atol=1e-6
        )
