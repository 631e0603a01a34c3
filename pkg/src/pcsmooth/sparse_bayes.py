"""Sparse Bayesian linear regression (relevance vector machine).

Weights carry independent zero-mean Gaussian priors with per-weight
precision hyperparameters; hyperparameters and the noise variance are
re-estimated by fixed-point evidence maximization. Weights whose
precision crosses ``prune_threshold`` are removed from the model and
reported as exactly zero, which is what makes polynomial chaos fits on
small sample budgets behave.

The fixed-point step is safeguarded by a marginal-likelihood line
search: a step that would decrease the log evidence is geometrically
shortened until it does not, so the evidence trace is non-decreasing by
construction (up to a relative slack of 1e-12).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .pce import Basis, MultiIndexSet, PCExpansion, total_degree_index_set

__all__ = [
    "RvmConfig",
    "RvmResult",
    "DesignMatrix",
    "rvm_fit",
    "rvm_predict",
    "fit_pce",
    "fit_pce_full",
]

_ALPHA_CAP = 1e30  # stand-in for an infinite precision; always above prune level


@dataclass(frozen=True)
class RvmConfig:
    """Settings for the evidence-maximization loop.

    ``tol`` bounds the largest change in log precision (and log noise
    variance) between accepted iterations; ``noise_floor`` is the smallest
    admissible noise variance, ``prune_threshold`` the precision beyond
    which a weight is treated as removed. After the evidence ascent,
    weights whose magnitude stays below ``significance_z`` posterior
    standard deviations are dropped one at a time (weakest first); the
    precision fixed point parks such weights at a small nonzero value
    instead of driving their precision out to infinity, so a sparsity
    threshold on the precision alone never removes them. Set
    ``significance_z = 0`` to keep every surviving feature.
    """

    max_iter: int = 200
    tol: float = 1e-6
    noise_floor: float = 1e-12
    prune_threshold: float = 1e12
    estimate_noise: bool = True
    significance_z: float = 3.0

    def __post_init__(self) -> None:
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0 or self.noise_floor <= 0 or self.prune_threshold <= 1:
            raise ValueError("tol, noise_floor must be > 0 and prune_threshold > 1")
        if self.significance_z < 0:
            raise ValueError("significance_z must be >= 0")


@dataclass
class DesignMatrix:
    """Feature matrix with shape bookkeeping, shared by multi-output fits."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError(f"design must be a 2-d array, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("design matrix contains non-finite entries")
        self.values = v

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass
class RvmResult:
    """Posterior summary of one sparse regression.

    ``weights`` and ``precisions`` cover all features; pruned entries hold
    exactly 0.0 and ``inf``. ``posterior_cov`` is restricted to the active
    set, in ``active_set`` order.
    """

    weights: np.ndarray
    precisions: np.ndarray
    noise_var: float
    active_set: np.ndarray
    posterior_cov: np.ndarray
    log_evidence_trace: np.ndarray
    n_iter: int
    converged: bool
    flags: list[str] = field(default_factory=list)


class _Posterior(NamedTuple):
    mu: np.ndarray          # active-set posterior mean
    diag_cov: np.ndarray    # active-set posterior variances
    log_evidence: float
    rss: float              # squared residual norm of the posterior mean fit
    used_pinv: bool


def _sym_solve(matrix: np.ndarray):
    """Return (solve, logdet, used_pinv) for a symmetric PD-ish matrix."""
    try:
        cho = cho_factor(matrix, lower=True, check_finite=False)
        logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
        return (lambda b: cho_solve(cho, b, check_finite=False)), logdet, False
    except np.linalg.LinAlgError:
        pass
    except ValueError:
        pass
    eigvals, eigvecs = np.linalg.eigh(matrix)
    cutoff = np.max(np.abs(eigvals)) * 1e-14
    inv = np.where(eigvals > cutoff, 1.0 / np.maximum(eigvals, cutoff), 0.0)
    logdet = float(np.sum(np.log(np.maximum(eigvals, cutoff))))
    return (lambda b: eigvecs @ (inv[:, None] * (eigvecs.T @ b))
            if b.ndim == 2 else eigvecs @ (inv * (eigvecs.T @ b))), logdet, True


def _posterior(
    design: np.ndarray,
    targets: np.ndarray,
    alpha: np.ndarray,
    noise_var: float,
    prune_threshold: float,
) -> _Posterior:
    n, p = design.shape
    active = alpha < prune_threshold
    mu_full = np.zeros(p)
    if not np.any(active):
        rss = float(targets @ targets)
        logev = -0.5 * (n * math.log(2.0 * math.pi * noise_var) + rss / noise_var)
        return _Posterior(mu_full[:0], mu_full[:0], logev, rss, False)

    phi = design[:, active]
    a = alpha[active]
    p_act = phi.shape[1]
    used_pinv = False

    if p_act <= n:
        h = np.diag(a) + (phi.T @ phi) / noise_var
        solve, logdet_h, used_pinv = _sym_solve(h)
        sigma = solve(np.eye(p_act))
        mu = sigma @ (phi.T @ targets) / noise_var
        diag_cov = np.diag(sigma).copy()
        logdet_r = n * math.log(noise_var) + logdet_h - float(np.sum(np.log(a)))
        quad = (targets @ targets - targets @ (phi @ mu)) / noise_var
    else:
        g = phi.T / a[:, None]          # A^{-1} Phi^T
        s = phi @ g                     # Phi A^{-1} Phi^T
        r = s + noise_var * np.eye(n)
        solve, logdet_r, used_pinv = _sym_solve(r)
        mu = g @ solve(targets)
        diag_cov = 1.0 / a - np.einsum("pn,np->p", g, solve(g.T))
        quad = float(targets @ solve(targets))

    resid = targets - phi @ mu
    rss = float(resid @ resid)
    logev = -0.5 * (n * math.log(2.0 * math.pi) + logdet_r + quad)
    return _Posterior(mu, np.maximum(diag_cov, 0.0), float(logev), rss, used_pinv)


def rvm_fit(
    design: DesignMatrix | np.ndarray,
    targets: np.ndarray,
    config: RvmConfig | None = None,
) -> RvmResult:
    """Fit one sparse Bayesian regression.

    Parameters
    ----------
    design : DesignMatrix or ndarray, shape (n_samples, n_features)
    targets : ndarray, shape (n_samples,)
    config : RvmConfig, optional

    Returns
    -------
    RvmResult
        Posterior mean weights (pruned entries exactly zero), precisions,
        estimated noise variance, the active set, its posterior covariance
        and the accepted log-evidence trace.
    """
    if config is None:
        config = RvmConfig()
    if not isinstance(design, DesignMatrix):
        design = DesignMatrix(design)
    phi = design.values
    u = np.asarray(targets, dtype=float).ravel()
    if u.shape[0] != design.n_samples:
        raise ValueError(
            f"targets have {u.shape[0]} rows but the design has {design.n_samples}"
        )
    if not np.all(np.isfinite(u)):
        raise ValueError("targets contain non-finite entries")

    n, p = phi.shape
    flags: list[str] = []

    target_var = float(np.var(u))
    noise_var = max(0.1 * target_var, config.noise_floor)
    alpha = np.full(p, 1e-6)
    # features that are identically zero carry no information; drop them now
    dead = np.einsum("np,np->p", phi, phi) == 0.0
    alpha[dead] = _ALPHA_CAP

    state = _posterior(phi, u, alpha, noise_var, config.prune_threshold)
    trace = [state.log_evidence]
    slack = 1e-12
    converged = False
    n_iter = 0

    for n_iter in range(1, config.max_iter + 1):
        active = alpha < config.prune_threshold
        if not np.any(active):
            converged = True
            break
        a_act = alpha[active]
        gamma = np.clip(1.0 - a_act * state.diag_cov, 0.0, 1.0)
        mu_sq = state.mu**2

        alpha_cand = alpha.copy()
        with np.errstate(divide="ignore", invalid="ignore"):
            updated = np.where(mu_sq > 0.0, gamma / mu_sq, _ALPHA_CAP)
        alpha_cand[active] = np.minimum(np.nan_to_num(updated, nan=_ALPHA_CAP), _ALPHA_CAP)

        if config.estimate_noise:
            denom = max(n - float(np.sum(gamma)), 1e-8 * n)
            noise_cand = max(state.rss / denom, config.noise_floor)
        else:
            noise_cand = noise_var

        log_alpha_old = np.log(alpha)
        log_alpha_new = np.log(alpha_cand)
        log_noise_old = math.log(noise_var)
        log_noise_new = math.log(noise_cand)

        accepted = None
        step = 1.0
        for _ in range(9):
            a_try = np.exp(log_alpha_old + step * (log_alpha_new - log_alpha_old))
            s_try = math.exp(log_noise_old + step * (log_noise_new - log_noise_old))
            cand = _posterior(phi, u, a_try, s_try, config.prune_threshold)
            if cand.log_evidence >= state.log_evidence - slack * max(
                1.0, abs(state.log_evidence)
            ):
                accepted = (a_try, s_try, cand, step)
                break
            step *= 0.5
        if accepted is None:
            # the fixed point cannot raise the evidence further from here
            converged = True
            break

        a_try, s_try, cand, step = accepted
        if step < 1.0:
            flags.append(f"iteration {n_iter}: evidence step shortened to {step:g}")
        delta = float(np.max(np.abs(np.log(a_try) - log_alpha_old)))
        delta = max(delta, abs(math.log(s_try) - log_noise_old))
        alpha, noise_var, state = a_try, s_try, cand
        if cand.used_pinv and "rank-deficient design resolved by pseudo-inverse" not in flags:
            flags.append("rank-deficient design resolved by pseudo-inverse")
        trace.append(state.log_evidence)
        if delta < config.tol:
            converged = True
            break

    # The accepted-evidence trace above is the ascent record; the final
    # significance sweep below may trade a little evidence for sparsity.
    if config.significance_z > 0.0:
        while np.any(alpha < config.prune_threshold):
            act = alpha < config.prune_threshold
            ratio = np.abs(state.mu) / np.sqrt(np.maximum(state.diag_cov, 1e-300))
            weakest = int(np.argmin(ratio))
            if ratio[weakest] > config.significance_z:
                break
            alpha[np.flatnonzero(act)[weakest]] = _ALPHA_CAP
            state = _posterior(phi, u, alpha, noise_var, config.prune_threshold)
        if config.estimate_noise:
            act = alpha < config.prune_threshold
            gamma = np.clip(1.0 - alpha[act] * state.diag_cov, 0.0, 1.0)
            denom = max(n - float(np.sum(gamma)), 1e-8 * n)
            noise_var = max(state.rss / denom, config.noise_floor)
            state = _posterior(phi, u, alpha, noise_var, config.prune_threshold)

    active = alpha < config.prune_threshold
    weights = np.zeros(p)
    weights[active] = state.mu
    precisions = np.where(active, alpha, np.inf)

    # full posterior covariance on the active set, for predictive variances
    idx = np.flatnonzero(active)
    if idx.size:
        phi_a = phi[:, active]
        h = np.diag(alpha[active]) + (phi_a.T @ phi_a) / noise_var
        solve, _, _ = _sym_solve(h)
        posterior_cov = solve(np.eye(idx.size))
        posterior_cov = 0.5 * (posterior_cov + posterior_cov.T)
    else:
        posterior_cov = np.zeros((0, 0))

    return RvmResult(
        weights=weights,
        precisions=precisions,
        noise_var=float(noise_var),
        active_set=idx,
        posterior_cov=posterior_cov,
        log_evidence_trace=np.array(trace),
        n_iter=n_iter,
        converged=converged,
        flags=flags,
    )


def rvm_predict(
    result: RvmResult, design: DesignMatrix | np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance at new design rows.

    The variance is the estimated noise variance plus the weight-posterior
    quadratic form, so it is never below ``result.noise_var``.
    """
    if not isinstance(design, DesignMatrix):
        design = DesignMatrix(design)
    phi = design.values
    mean = phi @ result.weights
    phi_a = phi[:, result.active_set]
    if result.active_set.size:
        var = result.noise_var + np.einsum(
            "np,pq,nq->n", phi_a, result.posterior_cov, phi_a
        )
    else:
        var = np.full(phi.shape[0], result.noise_var)
    return mean, np.maximum(var, result.noise_var)


def fit_pce_full(
    germ_samples: np.ndarray,
    target_samples: np.ndarray,
    basis: Basis,
    order: int,
    config: RvmConfig | None = None,
    index_set: MultiIndexSet | None = None,
) -> tuple[PCExpansion, list[RvmResult]]:
    """Regress target samples on a polynomial basis, one RVM per output.

    All outputs share the design matrix. Returns the expansion together
    with the per-output regression results (useful for residual variances
    and active sets).
    """
    germ_samples = np.atleast_2d(np.asarray(germ_samples, dtype=float))
    targets = np.asarray(target_samples, dtype=float)
    if targets.ndim == 1:
        targets = targets[:, None]
    if targets.shape[0] != germ_samples.shape[0]:
        raise ValueError(
            f"{germ_samples.shape[0]} germ samples but {targets.shape[0]} target rows"
        )
    if index_set is None:
        index_set = total_degree_index_set(germ_samples.shape[1], order)
    design = DesignMatrix(basis.design(germ_samples, index_set))
    results = [rvm_fit(design, targets[:, j], config) for j in range(targets.shape[1])]
    coeffs = np.vstack([r.weights for r in results])
    return PCExpansion(coeffs, index_set, basis), results


def fit_pce(
    germ_samples: np.ndarray,
    target_samples: np.ndarray,
    basis: Basis,
    order: int,
    config: RvmConfig | None = None,
) -> PCExpansion:
    """Sparse polynomial chaos fit of sampled data; see ``fit_pce_full``."""
    expansion, _ = fit_pce_full(germ_samples, target_samples, basis, order, config)
    return expansion
