import numpy as np
import pytest

from pcsmooth.pce import HermiteBasis, pce_eval, total_degree_index_set
from pcsmooth.sparse_bayes import (
    DesignMatrix,
    RvmConfig,
    fit_pce,
    fit_pce_full,
    rvm_fit,
    rvm_predict,
)


def planted_problem(rng, sigma, n=100, dim=3, order=4, k_active=5):
    """Sparse coefficients on a Hermite design plus Gaussian noise."""
    index_set = total_degree_index_set(dim, order)
    xi = rng.standard_normal((n, dim))
    design = HermiteBasis().design(xi, index_set)
    weights = np.zeros(len(index_set))
    # well-separated magnitudes so support recovery is clean
    active = rng.choice(np.arange(1, len(index_set)), size=k_active, replace=False)
    weights[active] = rng.uniform(1.0, 3.0, size=k_active) * rng.choice([-1, 1], k_active)
    targets = design @ weights + sigma * rng.standard_normal(n)
    return design, weights, np.sort(active), targets


class TestRvmFit:
    def test_single_feature_exact(self):
        phi = np.linspace(-1, 1, 40)[:, None]
        res = rvm_fit(phi, 3.0 * phi[:, 0])
        assert res.converged
        assert res.weights[0] == pytest.approx(3.0, abs=1e-6)
        assert res.noise_var < 1e-10

    def test_planted_support_recovered(self, rng):
        design, weights, active, targets = planted_problem(rng, sigma=0.01)
        res = rvm_fit(design, targets)
        recovered = np.sort(res.active_set[res.active_set > 0])
        np.testing.assert_array_equal(recovered, active)

    def test_planted_weights_within_posterior_band(self, rng):
        design, weights, active, targets = planted_problem(rng, sigma=0.01)
        res = rvm_fit(design, targets)
        std = np.sqrt(np.diag(res.posterior_cov))
        for pos, j in enumerate(res.active_set):
            assert abs(res.weights[j] - weights[j]) <= 3.0 * std[pos] + 1e-12

    def test_evidence_monotone(self, rng):
        design, _, _, targets = planted_problem(rng, sigma=0.05)
        res = rvm_fit(design, targets)
        trace = res.log_evidence_trace
        assert len(trace) >= 2
        assert np.all(np.diff(trace) >= -1e-10)

    def test_sparsity_nondecreasing_in_noise(self, rng):
        design, weights, active, _ = planted_problem(rng, sigma=0.0)
        clean = design @ weights
        noise = rng.standard_normal(len(clean))
        nnz = []
        for sigma in (0.05, 0.5):
            res = rvm_fit(design, clean + sigma * noise)
            nnz.append(np.count_nonzero(res.weights))
        assert nnz[1] <= nnz[0]

    def test_pruned_entries_are_exact(self, rng):
        design, _, _, targets = planted_problem(rng, sigma=0.01)
        res = rvm_fit(design, targets)
        pruned = np.setdiff1d(np.arange(design.shape[1]), res.active_set)
        assert np.all(res.weights[pruned] == 0.0)
        assert np.all(np.isinf(res.precisions[pruned]))

    def test_noise_estimate_tracks_truth(self, rng):
        design, weights, _, _ = planted_problem(rng, sigma=0.0)
        sigma = 0.1
        targets = design @ weights + sigma * rng.standard_normal(len(design))
        res = rvm_fit(design, targets)
        assert 0.25 * sigma**2 < res.noise_var < 4.0 * sigma**2

    def test_design_matrix_wrapper(self, rng):
        design, _, _, targets = planted_problem(rng, sigma=0.05)
        a = rvm_fit(design, targets)
        b = rvm_fit(DesignMatrix(design), targets)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            rvm_fit(np.array([[1.0], [np.nan]]), np.array([0.0, 1.0]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            rvm_fit(np.ones((5, 2)), np.ones(4))


class TestPrediction:
    def test_predict_matches_design_product(self, rng):
        design, _, _, targets = planted_problem(rng, sigma=0.05)
        res = rvm_fit(design, targets)
        mean, var = rvm_predict(res, design)
        np.testing.assert_allclose(mean, design @ res.weights, atol=1e-12)
        assert np.all(var >= res.noise_var - 1e-15)


class TestFitPce:
    def test_recovers_polynomial(self, rng):
        index_set = total_degree_index_set(2, 3)
        xi = rng.standard_normal((150, 2))
        design = HermiteBasis().design(xi, index_set)
        coeffs = np.zeros((2, len(index_set)))
        coeffs[0, index_set.position((1, 0))] = 2.0
        coeffs[1, index_set.position((0, 2))] = -1.5
        targets = design @ coeffs.T
        fitted, results = fit_pce_full(xi, targets, HermiteBasis(), 3)
        np.testing.assert_allclose(fitted.coeffs, coeffs, atol=1e-6)
        assert all(r.noise_var < 1e-8 for r in results)

    def test_fit_matches_samples_out_of_sample(self, rng):
        index_set = total_degree_index_set(3, 2)
        xi = rng.standard_normal((200, 3))
        truth = np.stack(
            [xi[:, 0] ** 2 - xi[:, 1], 0.5 * xi[:, 2] + xi[:, 0] * xi[:, 1]], axis=1
        )
        fitted = fit_pce(xi, truth, HermiteBasis(), 2)
        hold = rng.standard_normal((100, 3))
        ref = np.stack(
            [hold[:, 0] ** 2 - hold[:, 1], 0.5 * hold[:, 2] + hold[:, 0] * hold[:, 1]],
            axis=1,
        )
        np.testing.assert_allclose(pce_eval(fitted, hold), ref, atol=1e-4)

    def test_custom_index_set_embedding(self, rng):
        big = total_degree_index_set(2, 4)
        xi = rng.standard_normal((120, 2))
        fitted, _ = fit_pce_full(
            xi, (xi[:, 0] * 2.0)[:, None], HermiteBasis(), 1, index_set=big
        )
        assert fitted.index_set is big or fitted.index_set == big
        assert fitted.coeffs.shape[1] == len(big)
