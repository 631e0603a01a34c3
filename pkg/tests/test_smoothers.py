"""Smoothing drivers on a scalar linear chain with a closed-form answer.

State x_t = a^t x_0 with x_0 ~ N(m0, P0) and one noisy observation of
x_T. Every report-time posterior is then jointly Gaussian with the data,
so the exact smoothed mean and variance are one covariance formula away.
"""

import numpy as np
import pytest

from pcsmooth.filtering import (
    FilterConfig,
    MeasurementModel,
    SmootherProblem,
    direct_smooth,
    ps1_smooth,
    ps2_smooth,
)
from pcsmooth.pce import GaussianDensity, pce_cov, pce_mean

A = 1.15
M0 = 0.3
P0 = 1.0
R = 0.4
T = 4.0
Y_MES = 1.9


def make_problem(final_time=T):
    def propagate(states, t_start, t_end):
        return states * A ** (t_end - t_start)

    def prior_at(t):
        return GaussianDensity(
            np.array([M0 * A**t]), np.array([[P0 * A ** (2.0 * t)]])
        ).as_expansion()

    return SmootherProblem(
        propagate=propagate,
        prior_at=prior_at,
        y_mes=np.array([Y_MES]),
        model=MeasurementModel((0,), np.array([[R]])),
        t0=0.0,
        final_time=final_time,
    )


def analytic(t):
    """Smoothed mean and variance of x_t given the observation of x_T."""
    s = A ** (2.0 * T) * P0 + R
    c_ty = A ** (t + T) * P0
    mean = M0 * A**t + c_ty / s * (Y_MES - M0 * A**T)
    var = A ** (2.0 * t) * P0 - c_ty**2 / s
    return mean, var


def cfg(**kw):
    base = dict(delta_tau=1.0, seed=0)
    base.update(kw)
    return FilterConfig(**base)


class TestDirectSmoother:
    def test_matches_analytic(self):
        result = direct_smooth(make_problem(), cfg())
        assert result.method == "ds"
        assert [s.time for s in result.steps] == [0.0, 1.0, 2.0, 3.0, 4.0]
        for step in result.steps:
            mean, var = analytic(step.time)
            assert abs(pce_mean(step.posterior)[0] - mean) < 1e-8
            assert abs(pce_cov(step.posterior)[0, 0] - var) < 1e-8
            assert step.converged and not step.diverged

    def test_zero_span(self):
        result = direct_smooth(make_problem(final_time=0.0), cfg())
        assert len(result.steps) == 1
        # a zero-length window means the data directly constrain x_0
        s = P0 + R
        mean = M0 + P0 / s * (Y_MES - M0)
        var = P0 - P0**2 / s
        assert abs(pce_mean(result.steps[0].posterior)[0] - mean) < 1e-8
        assert abs(pce_cov(result.steps[0].posterior)[0, 0] - var) < 1e-8

    def test_step_lookup(self):
        result = direct_smooth(make_problem(), cfg())
        assert result.step_at(2.0).time == 2.0
        with pytest.raises(KeyError):
            result.step_at(2.5)
        assert result.total_iterations >= len(result.steps)


class TestPs2Smoother:
    def test_matches_analytic(self):
        result = ps2_smooth(make_problem(), cfg())
        assert result.method == "ps2"
        for step in result.steps:
            mean, var = analytic(step.time)
            assert abs(pce_mean(step.posterior)[0] - mean) < 1e-6
            assert abs(pce_cov(step.posterior)[0, 0] - var) < 1e-6

    def test_reexpanded_posterior_attached(self):
        result = ps2_smooth(make_problem(), cfg())
        for step in result.steps:
            assert step.reexpanded is not None
            assert step.reexpanded.germ_dim == 1
            # the re-expansion keeps the first two moments
            np.testing.assert_allclose(
                pce_mean(step.reexpanded), pce_mean(step.posterior), atol=1e-9
            )
            np.testing.assert_allclose(
                pce_cov(step.reexpanded), pce_cov(step.posterior), atol=1e-9
            )

    def test_deterministic(self):
        r1 = ps2_smooth(make_problem(), cfg(seed=42))
        r2 = ps2_smooth(make_problem(), cfg(seed=42))
        for s1, s2 in zip(r1.steps, r2.steps):
            assert np.array_equal(s1.posterior.coeffs, s2.posterior.coeffs)


class TestPs1Smoother:
    def test_gaussianized_pseudo_noise_biases_the_chain(self):
        """Treating the previous posterior as plain measurement noise
        discounts it twice; on this chain the t = 0 mean lands well off
        the smoothed answer."""
        result = ps1_smooth(make_problem(), cfg())
        assert result.method == "ps1"
        mean0, var0 = analytic(0.0)
        step0 = result.step_at(0.0)
        assert abs(pce_mean(step0.posterior)[0] - mean0) > 0.05
        assert abs(pce_cov(step0.posterior)[0, 0] - var0) > 5e-3

    def test_bias_correction_restores_the_mean(self):
        result = ps1_smooth(make_problem(), cfg(bias_correct=True))
        for step in result.steps:
            mean, _ = analytic(step.time)
            assert abs(pce_mean(step.posterior)[0] - mean) < 1e-8
        # the correction is recorded on every backward step
        for step in result.steps:
            if step.time < T:
                assert step.bias_correction is not None

    def test_terminal_step_is_shared(self):
        # the update at the measurement time is the same linear update
        # for all three methods
        r_ds = direct_smooth(make_problem(), cfg())
        r_p1 = ps1_smooth(make_problem(), cfg())
        r_p2 = ps2_smooth(make_problem(), cfg())
        means = [pce_mean(r.step_at(T).posterior)[0] for r in (r_ds, r_p1, r_p2)]
        assert max(means) - min(means) < 1e-9
