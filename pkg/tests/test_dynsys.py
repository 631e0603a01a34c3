import numpy as np
import pytest

from pcsmooth.dynsys import (
    IntegrationError,
    IntegratorConfig,
    SystemParams,
    integrate,
    lorenz84,
    lorenz84_rhs,
    propagate_ensemble,
)


def rk4(rhs, x0, t0, t1, dt):
    """Fixed-step fourth-order Runge-Kutta reference."""
    n = max(1, int(round((t1 - t0) / dt)))
    h = (t1 - t0) / n
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(n):
        k1 = rhs(x)
        k2 = rhs(x + 0.5 * h * k1)
        k3 = rhs(x + 0.5 * h * k2)
        k4 = rhs(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


class TestRhs:
    def test_reference_point(self, atmos_params):
        # hand-computed at (1, 0, -0.75)
        out = lorenz84_rhs(np.array([1.0, 0.0, -0.75]), atmos_params)
        np.testing.assert_allclose(out, [1.1875, 4.0, 0.0], rtol=0, atol=1e-14)

    def test_origin(self, atmos_params):
        out = lorenz84_rhs(np.zeros(3), atmos_params)
        np.testing.assert_allclose(out, [2.0, 1.0, 0.0], rtol=0, atol=1e-14)

    def test_factory_matches_direct(self, atmos_params, rng):
        rhs = lorenz84(atmos_params)
        for _ in range(5):
            x = rng.standard_normal(3)
            np.testing.assert_array_equal(rhs(x), lorenz84_rhs(x, atmos_params))

    def test_batched_evaluation(self, atmos_params, rng):
        rhs = lorenz84(atmos_params)
        xs = rng.standard_normal((7, 3))
        batched = rhs(xs)
        assert batched.shape == (7, 3)
        for i in range(7):
            np.testing.assert_allclose(batched[i], rhs(xs[i]), atol=1e-14)

    def test_bad_shape_rejected(self, atmos_params):
        with pytest.raises(ValueError):
            lorenz84_rhs(np.zeros(2), atmos_params)


class TestIntegrate:
    def test_zero_span_is_identity(self, atmos_params):
        rhs = lorenz84(atmos_params)
        x0 = np.array([1.0, 0.0, -0.75])
        np.testing.assert_array_equal(integrate(rhs, x0, 3.0, 3.0), x0)

    def test_against_fixed_step_rk4(self, atmos_params):
        rhs = lorenz84(atmos_params)
        x0 = np.array([1.0, 0.0, -0.75])
        ref = rk4(rhs, x0, 0.0, 0.05, 1e-4)
        out = integrate(rhs, x0, 0.0, 0.05, IntegratorConfig(abs_tol=1e-10, rel_tol=1e-10))
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-6)

    def test_long_window_stays_finite(self, atmos_params):
        rhs = lorenz84(atmos_params)
        out = integrate(rhs, np.array([1.0, 0.0, -0.75]), 0.0, 0.8)
        assert np.all(np.isfinite(out))

    def test_backward_span_refused(self, atmos_params):
        rhs = lorenz84(atmos_params)
        with pytest.raises(ValueError):
            integrate(rhs, np.array([0.3, -1.2, 0.5]), 0.1, 0.0)

    def test_linear_system_matches_exponential(self):
        a = np.array([[0.0, 1.0], [-1.0, 0.0]])
        rhs = lambda x: x @ a.T if x.ndim > 1 else a @ x
        out = integrate(rhs, np.array([1.0, 0.0]), 0.0, np.pi / 2,
                        IntegratorConfig(abs_tol=1e-12, rel_tol=1e-12))
        np.testing.assert_allclose(out, [0.0, -1.0], atol=1e-9)

    def test_blowup_raises(self):
        rhs = lambda x: x**2
        with pytest.raises(IntegrationError):
            integrate(rhs, np.array([1.0]), 0.0, 2.0)

    def test_nonfinite_rhs_raises(self):
        rhs = lambda x: np.full_like(x, np.nan)
        with pytest.raises(IntegrationError):
            integrate(rhs, np.array([1.0]), 0.0, 1.0)


class TestPropagateEnsemble:
    def test_matches_member_integration(self, atmos_params, rng):
        rhs = lorenz84(atmos_params)
        states = np.array([1.0, 0.0, -0.75]) + 0.1 * rng.standard_normal((12, 3))
        out = propagate_ensemble(rhs, states, 0.0, 0.05)
        assert out.shape == states.shape
        for i in range(len(states)):
            np.testing.assert_allclose(
                out[i], integrate(rhs, states[i], 0.0, 0.05), atol=1e-9
            )

    def test_vectorized_agrees_with_loop(self, atmos_params, rng):
        rhs = lorenz84(atmos_params)
        states = np.array([1.0, 0.0, -0.75]) + 0.1 * rng.standard_normal((20, 3))
        slow = propagate_ensemble(rhs, states, 0.0, 0.1, vectorized=False)
        fast = propagate_ensemble(rhs, states, 0.0, 0.1, vectorized=True)
        np.testing.assert_allclose(fast, slow, atol=1e-7)

    def test_ordering_preserved(self, atmos_params):
        rhs = lorenz84(atmos_params)
        states = np.array([[1.0, 0.0, -0.75], [1.5, 0.2, -0.5], [0.4, -0.3, 0.1]])
        out = propagate_ensemble(rhs, states, 0.0, 0.02)
        singles = [integrate(rhs, s, 0.0, 0.02) for s in states]
        np.testing.assert_allclose(out, singles, atol=1e-9)


def test_params_are_immutable(atmos_params):
    with pytest.raises(Exception):
        atmos_params.a = 1.0
