import numpy as np
import pytest

from pcsmooth.pce import (
    GaussianDensity,
    HermiteBasis,
    MultiIndexSet,
    PCExpansion,
    affine_of_expansion,
    combine_expansions,
    embed_expansion,
    ensure_psd,
    gaussianize,
    hermite_eval,
    load_pce,
    dump_pce,
    pce_cov,
    pce_eval,
    pce_mean,
    read_pce,
    sample_germ,
    total_degree_index_set,
    write_pce,
)

from conftest import random_spd


class TestIndexSets:
    def test_cardinalities(self):
        # C(dim + order, order)
        assert len(total_degree_index_set(2, 2)) == 6
        assert len(total_degree_index_set(3, 4)) == 35
        assert len(total_degree_index_set(1, 0)) == 1

    def test_first_index_is_zero(self):
        s = total_degree_index_set(3, 2)
        assert s.indices[0] == (0, 0, 0)

    def test_graded_ordering(self):
        s = total_degree_index_set(2, 3)
        degrees = [sum(a) for a in s.indices]
        assert degrees == sorted(degrees)

    def test_position_roundtrip(self):
        s = total_degree_index_set(3, 4)
        for i, alpha in enumerate(s.indices):
            assert s.position(alpha) == i

    def test_duplicate_rejected(self):
        with pytest.raises(ValueError):
            MultiIndexSet(2, 1, ((0, 0), (1, 0), (1, 0)))


class TestHermite:
    def test_low_orders_at_two(self):
        pts = np.array([2.0])
        assert hermite_eval((0,), pts)[0] == 1.0
        assert hermite_eval((1,), pts)[0] == 2.0
        # He2(t) = t^2 - 1
        assert hermite_eval((2,), pts)[0] == 3.0
        # He3(t) = t^3 - 3t
        assert hermite_eval((3,), pts)[0] == 2.0

    def test_product_index(self):
        # He1(1) * He2(2) = 1 * 3
        val = hermite_eval((1, 2), np.array([[1.0, 2.0]]))
        assert val[0] == pytest.approx(3.0, abs=1e-14)

    def test_mc_orthogonality_weights(self, rng):
        # E[psi_a psi_b] = delta_ab * prod(a!)
        s = total_degree_index_set(2, 3)
        xi = rng.standard_normal((400_000, 2))
        design = HermiteBasis().design(xi, s)
        gram = design.T @ design / len(xi)
        expected = np.diag(HermiteBasis().norm_sq(s))
        scale = np.sqrt(np.outer(np.diag(expected), np.diag(expected)))
        assert np.max(np.abs(gram - expected) / scale) < 0.05

    def test_norm_sq_factorials(self):
        s = total_degree_index_set(2, 3)
        w = HermiteBasis().norm_sq(s)
        assert w[s.position((0, 0))] == 1.0
        assert w[s.position((2, 0))] == 2.0
        assert w[s.position((1, 2))] == 2.0
        assert w[s.position((3, 0))] == 6.0


class TestExpansionMoments:
    def test_scalar_eval_var_oracle(self):
        # u = 2 + 3*He1 + 1*He2 on a scalar germ
        s = total_degree_index_set(1, 2)
        u = PCExpansion(np.array([[2.0, 3.0, 1.0]]), s, HermiteBasis())
        assert pce_eval(u, np.array([[1.0]]))[0, 0] == pytest.approx(5.0)
        assert pce_mean(u)[0] == 2.0
        assert pce_cov(u)[0, 0] == pytest.approx(11.0, abs=1e-14)

    def test_gaussianize_matches_moments(self):
        s = total_degree_index_set(1, 2)
        u = PCExpansion(np.array([[2.0, 3.0, 1.0]]), s, HermiteBasis())
        g = gaussianize(u)
        assert g.mean[0] == pytest.approx(2.0)
        assert g.cov[0, 0] == pytest.approx(11.0)

    def test_cov_cross_terms(self, rng):
        s = total_degree_index_set(2, 2)
        coeffs = rng.standard_normal((3, len(s)))
        u = PCExpansion(coeffs, s, HermiteBasis())
        xi = rng.standard_normal((2_000_000, 2))
        vals = pce_eval(u, xi)
        mc = np.cov(vals.T)
        np.testing.assert_allclose(pce_cov(u), mc, atol=0.05 * np.max(np.abs(mc)))

    def test_mean_matches_mc(self, rng):
        s = total_degree_index_set(3, 3)
        coeffs = rng.standard_normal((2, len(s)))
        u = PCExpansion(coeffs, s, HermiteBasis())
        xi = rng.standard_normal((1_000_000, 3))
        np.testing.assert_allclose(
            pce_mean(u), pce_eval(u, xi).mean(axis=0), atol=2e-2
        )

    def test_coeff_shape_validated(self):
        s = total_degree_index_set(2, 1)
        with pytest.raises(ValueError):
            PCExpansion(np.zeros((1, len(s) + 2)), s, HermiteBasis())


class TestGaussianDensity:
    def test_sample_moments(self, rng):
        cov = random_spd(3, rng)
        mean = np.array([1.0, -2.0, 0.5])
        g = GaussianDensity(mean, cov)
        draws = g.sample(400_000, rng)
        np.testing.assert_allclose(draws.mean(axis=0), mean, atol=0.02)
        np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.1)

    def test_as_expansion_roundtrip(self, rng):
        cov = random_spd(4, rng)
        mean = rng.standard_normal(4)
        u = GaussianDensity(mean, cov).as_expansion()
        np.testing.assert_allclose(pce_mean(u), mean, atol=1e-12)
        np.testing.assert_allclose(pce_cov(u), cov, atol=1e-10)

    def test_sqrt_factor_reconstructs(self, rng):
        cov = random_spd(3, rng)
        g = GaussianDensity(np.zeros(3), cov)
        f = g.sqrt_factor()
        np.testing.assert_allclose(f @ f.T, cov, atol=1e-10)

    def test_semidefinite_cov_accepted(self):
        cov = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank 1
        g = GaussianDensity(np.zeros(2), cov)
        f = g.sqrt_factor()
        np.testing.assert_allclose(f @ f.T, cov, atol=1e-10)

    def test_asymmetric_cov_symmetrized(self):
        g = GaussianDensity(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        np.testing.assert_allclose(g.cov, [[1.0, 0.25], [0.25, 1.0]], atol=1e-14)

    def test_indefinite_cov_rejected(self):
        with pytest.raises(ValueError):
            GaussianDensity(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]))


class TestStructuralOps:
    def test_embed_preserves_values(self, rng):
        s = total_degree_index_set(2, 3)
        u = PCExpansion(rng.standard_normal((2, len(s))), s, HermiteBasis())
        emb = embed_expansion(u, 5, 2)
        xi = rng.standard_normal((50, 5))
        np.testing.assert_allclose(
            pce_eval(emb, xi), pce_eval(u, xi[:, 2:4]), atol=1e-12
        )

    def test_embed_keeps_moments(self, rng):
        s = total_degree_index_set(3, 2)
        u = PCExpansion(rng.standard_normal((3, len(s))), s, HermiteBasis())
        emb = embed_expansion(u, 7, 1)
        np.testing.assert_allclose(pce_mean(emb), pce_mean(u), atol=1e-13)
        np.testing.assert_allclose(pce_cov(emb), pce_cov(u), atol=1e-12)

    def test_affine_transform_moments(self, rng):
        s = total_degree_index_set(2, 2)
        u = PCExpansion(rng.standard_normal((3, len(s))), s, HermiteBasis())
        a = rng.standard_normal((2, 3))
        shift = rng.standard_normal(2)
        v = affine_of_expansion(a, u, shift)
        np.testing.assert_allclose(pce_mean(v), a @ pce_mean(u) + shift, atol=1e-12)
        np.testing.assert_allclose(pce_cov(v), a @ pce_cov(u) @ a.T, atol=1e-12)

    def test_combine_adds_independent_covariance(self, rng):
        s = total_degree_index_set(4, 2)
        ca = np.zeros((2, len(s)))
        cb = np.zeros((2, len(s)))
        # a uses germ dims 0-1 only, b uses dims 2-3 only
        for d, c in ((0, ca), (2, cb)):
            alpha1 = tuple(1 if k == d else 0 for k in range(4))
            alpha2 = tuple(1 if k == d + 1 else 0 for k in range(4))
            c[0, s.position(alpha1)] = 1.0
            c[1, s.position(alpha2)] = 2.0
        a = PCExpansion(ca, s, HermiteBasis())
        b = PCExpansion(cb, s, HermiteBasis())
        both = combine_expansions(a, b)
        np.testing.assert_allclose(pce_cov(both), pce_cov(a) + pce_cov(b), atol=1e-13)
        diff = combine_expansions(a, b, sign=-1.0)
        np.testing.assert_allclose(pce_cov(diff), pce_cov(a) + pce_cov(b), atol=1e-13)


class TestSerialization:
    def test_roundtrip(self, rng, tmp_path):
        s = total_degree_index_set(3, 2)
        u = PCExpansion(rng.standard_normal((3, len(s))), s, HermiteBasis())
        path = tmp_path / "state.pce"
        write_pce(u, path, config_hash="abc123")
        v = read_pce(path)
        np.testing.assert_array_equal(v.coeffs, u.coeffs)
        assert v.index_set.indices == u.index_set.indices

    def test_dump_load_exact(self, rng):
        s = total_degree_index_set(2, 4)
        u = PCExpansion(rng.standard_normal((1, len(s))) * 1e-7, s, HermiteBasis())
        v = load_pce(dump_pce(u))
        np.testing.assert_array_equal(v.coeffs, u.coeffs)

    def test_corrupt_text_rejected(self):
        with pytest.raises(ValueError):
            load_pce("not a serialized expansion")


class TestEnsurePsd:
    def test_tiny_negative_eigenvalue_clipped(self):
        m = np.array([[1.0, 0.0], [0.0, -1e-14]])
        fixed = ensure_psd(m)
        assert np.linalg.eigvalsh(fixed).min() >= 0.0

    def test_genuine_indefiniteness_raises(self):
        with pytest.raises(ValueError):
            ensure_psd(np.array([[1.0, 0.0], [0.0, -1e-6]]))

    def test_tolerance_is_relative(self):
        # same shape, scaled up: the -1e-6 eigenvalue is now within rel_tol
        m = 1e10 * np.array([[1.0, 0.0], [0.0, -1e-13]])
        fixed = ensure_psd(m, rel_tol=1e-12)
        assert np.linalg.eigvalsh(fixed).min() >= 0.0

    def test_spd_untouched(self, rng):
        m = random_spd(4, rng)
        np.testing.assert_allclose(ensure_psd(m), m, atol=1e-12)

    def test_result_symmetric(self, rng):
        a = rng.standard_normal((3, 3))
        m = a @ a.T
        m[0, 1] += 1e-9  # break symmetry slightly
        fixed = ensure_psd(m)
        np.testing.assert_array_equal(fixed, fixed.T)


def test_sample_germ_deterministic():
    a = sample_germ(50, 3, 7)
    b = sample_germ(50, 3, 7)
    np.testing.assert_array_equal(a, b)
    c = sample_germ(50, 3, 8)
    assert not np.array_equal(a, c)
