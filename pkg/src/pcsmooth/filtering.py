"""Polynomial-chaos Kalman updates and fixed-interval smoothing.

The state and every measured quantity are carried as expansions over a
shared Gaussian germ, partitioned into blocks: state germ, then (for
random-variable pseudo-measurements) the pseudo-measurement germ, then
the measurement-noise germ. Updates act on expansion coefficients, so a
linear-Gaussian problem reproduces the textbook Kalman algebra exactly;
nonlinear propagation windows are handled by Gauss-Newton re-linearization
around the current posterior mean.

Three smoothers are provided. Direct smoothing conditions the state at
each report time on the terminal measurement through the full-length
propagation window. The incremental variants walk backward one step at a
time, passing the previous posterior down either as a Gaussian
pseudo-measurement (with an optional mean-bias correction) or in full as
a random variable on its own germ block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .basis_adapt import kl_check, nataf_apply, nataf_fit, reexpand_hermite
from .dynsys import IntegrationError
from .pce import (
    GaussianDensity,
    HermiteBasis,
    MultiIndexSet,
    PCExpansion,
    affine_of_expansion,
    combine_expansions,
    embed_expansion,
    gaussianize,
    pce_cov,
    pce_eval,
    pce_mean,
    sample_germ,
    total_degree_index_set,
)
from .sparse_bayes import DesignMatrix, RvmConfig, fit_pce_full, rvm_fit

__all__ = [
    "MeasurementModel",
    "AffineForwardMap",
    "AffineInverseMap",
    "FilterConfig",
    "GnmkResult",
    "SmootherProblem",
    "SmootherStep",
    "SmootherResult",
    "forecast_measurement",
    "gmk_update",
    "estimate_forward_map_projection",
    "estimate_forward_map_bayes",
    "estimate_inverse_map",
    "gnmk_iterate",
    "direct_smooth",
    "ps1_smooth",
    "ps2_smooth",
    "bias_correct",
    "posterior_cov_rv",
    "report_times",
]


# ---------------------------------------------------------------------------
# small linear-algebra helpers
# ---------------------------------------------------------------------------


def _pinv(matrix: np.ndarray, rcond: float) -> tuple[np.ndarray, bool]:
    """Truncated-SVD pseudo-inverse; second value reports dropped directions."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    u, s, vt = np.linalg.svd(matrix, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros(matrix.T.shape), True
    keep = s > rcond * s[0]
    inv = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T, bool(np.any(~keep))


def _constant_expansion(values: np.ndarray, index_set: MultiIndexSet) -> PCExpansion:
    values = np.asarray(values, dtype=float).ravel()
    coeffs = np.zeros((values.size, len(index_set)))
    coeffs[:, 0] = values
    return PCExpansion(coeffs, index_set, HermiteBasis())


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeasurementModel:
    """Which state components are observed, and with what noise.

    ``selected`` lists the observed component indices (row selection);
    ``noise_cov`` is the additive Gaussian noise covariance on those
    components. The noise always lives on its own germ block, independent
    of the state germ.
    """

    selected: tuple[int, ...]
    noise_cov: np.ndarray

    def __post_init__(self) -> None:
        sel = tuple(int(i) for i in self.selected)
        if len(sel) == 0 or len(set(sel)) != len(sel) or any(i < 0 for i in sel):
            raise ValueError("selected must be distinct non-negative indices")
        cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if cov.shape != (len(sel), len(sel)):
            raise ValueError(
                f"noise_cov shape {cov.shape} does not match {len(sel)} observed components"
            )
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ValueError("noise_cov must be symmetric")
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "noise_cov", cov)

    @property
    def n_observed(self) -> int:
        return len(self.selected)

    def select(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states)[..., list(self.selected)]

    @staticmethod
    def full_state(dim: int, noise_cov: np.ndarray | None = None) -> "MeasurementModel":
        if noise_cov is None:
            noise_cov = np.zeros((dim, dim))
        return MeasurementModel(tuple(range(dim)), noise_cov)


@dataclass
class AffineForwardMap:
    """Local affine surrogate z ~ H (x - x_lin) + h of a propagation map."""

    matrix: np.ndarray        # (m, d)
    offset: np.ndarray        # (m,)
    linearization: np.ndarray  # (d,)
    eps_var: np.ndarray       # (m,) residual variance of the surrogate fit
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.matrix = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        self.offset = np.asarray(self.offset, dtype=float).ravel()
        self.linearization = np.asarray(self.linearization, dtype=float).ravel()
        self.eps_var = np.asarray(self.eps_var, dtype=float).ravel()
        m, d = self.matrix.shape
        if self.offset.shape != (m,) or self.linearization.shape != (d,):
            raise ValueError("inconsistent affine map shapes")
        if np.any(self.eps_var < 0) or not np.all(np.isfinite(self.matrix)):
            raise ValueError("affine map must be finite with nonnegative eps_var")

    def predict(self, states: np.ndarray) -> np.ndarray:
        return (np.asarray(states) - self.linearization) @ self.matrix.T + self.offset


@dataclass
class AffineInverseMap:
    """Gain form x ~ K y + b of the measurement-to-state regression."""

    gain: np.ndarray   # (d, m)
    offset: np.ndarray  # (d,)
    eps_var: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.gain = np.atleast_2d(np.asarray(self.gain, dtype=float))
        self.offset = np.asarray(self.offset, dtype=float).ravel()
        if self.offset.shape[0] != self.gain.shape[0]:
            raise ValueError("gain and offset row counts differ")


@dataclass(frozen=True)
class FilterConfig:
    """Knobs of the Gauss-Newton update loop and the smoothers.

    ``order`` is the total degree of the working expansion, ``n_samples``
    the germ sample count behind every regression, ``delta_tau`` the
    pseudo-update step in model time. ``map_mode`` selects projection or
    Bayesian estimation for both the forward and the inverse map.
    """

    tol: float = 1e-3
    max_iter: int = 100
    map_mode: str = "projection"
    pinv_rcond: float = 1e-10
    delta_tau: float | None = None
    bias_correct: bool = False
    order: int = 2
    obs_fit_order: int = 2
    n_samples: int = 100
    seed: int = 0
    rvm: RvmConfig = RvmConfig()
    reexpand_samples: int = 4096
    kl_tolerance: float = 0.05
    gaussian_tol: float = 1e-10

    def __post_init__(self) -> None:
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter >= 1")
        if self.map_mode not in ("projection", "bayes"):
            raise ValueError(f"unknown map_mode {self.map_mode!r}")
        if self.delta_tau is not None and self.delta_tau <= 0:
            raise ValueError("delta_tau must be positive")
        if self.order < 1 or self.n_samples < 4 or self.reexpand_samples < 16:
            raise ValueError("order >= 1, n_samples >= 4, reexpand_samples >= 16")
        if self.obs_fit_order < 1:
            raise ValueError("obs_fit_order must be >= 1")
        if self.pinv_rcond <= 0 or self.kl_tolerance <= 0 or self.gaussian_tol <= 0:
            raise ValueError("pinv_rcond, kl_tolerance, gaussian_tol must be positive")


@dataclass
class GnmkResult:
    """Converged (or flagged) outcome of one Gauss-Newton update."""

    posterior: PCExpansion
    iterations: int
    converged: bool
    diverged: bool
    mean_history: np.ndarray
    err_history: np.ndarray
    forward_map: AffineForwardMap | None
    inverse_map: AffineInverseMap | None
    eps_var: np.ndarray
    flags: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------


def forecast_measurement(x: PCExpansion, model: MeasurementModel) -> PCExpansion:
    """Observed components of ``x`` plus independent additive noise.

    The result lives on the concatenated germ [state germ | noise germ];
    the state block keeps its coefficients, the noise enters as an
    order-1 block of its own.
    """
    d = x.germ_dim
    m = model.n_observed
    order = max(x.index_set.order, 1)
    index_set = total_degree_index_set(d + m, order)
    x_emb = embed_expansion(x, d + m, 0, index_set)
    sel = list(model.selected)
    if max(sel) >= x.n_outputs:
        raise ValueError("selector index exceeds state dimension")
    coeffs = x_emb.coeffs[sel, :].copy()
    noise = GaussianDensity(np.zeros(m), model.noise_cov).as_expansion()
    noise_emb = embed_expansion(noise, d + m, d, index_set)
    return PCExpansion(coeffs + noise_emb.coeffs, index_set, HermiteBasis())


def gmk_update(
    x_f: PCExpansion,
    y_f: PCExpansion,
    y_mes: np.ndarray,
    pinv_rcond: float = 1e-10,
    flags: list[str] | None = None,
) -> PCExpansion:
    """Linear coefficient-wise update of ``x_f`` against measurement ``y_mes``.

    The gain is the cross covariance times the pseudo-inverse of the
    observation covariance; the measured value enters the mean column
    only. Requires both expansions on one germ / index set.
    """
    if x_f.index_set != y_f.index_set:
        raise ValueError("state and observation expansions must share one index set")
    y_mes = np.asarray(y_mes, dtype=float).ravel()
    if y_mes.shape[0] != y_f.n_outputs:
        raise ValueError("measured vector length does not match observation expansion")
    c_xy = pce_cov(x_f, y_f)
    c_y = pce_cov(y_f)
    c_y_pinv, dropped = _pinv(c_y, pinv_rcond)
    gain = c_xy @ c_y_pinv
    if dropped and flags is not None:
        innovation_mean = y_mes - pce_mean(y_f)
        if np.linalg.norm(innovation_mean) > 0:
            flags.append("singular observation covariance with nonzero innovation")
    coeffs = x_f.coeffs - gain @ y_f.coeffs
    coeffs[:, 0] += gain @ y_mes
    return PCExpansion(coeffs, x_f.index_set, x_f.basis)


def estimate_forward_map_projection(
    x: PCExpansion,
    z: PCExpansion,
    x_lin: np.ndarray,
    pinv_rcond: float = 1e-10,
    eps_var: np.ndarray | None = None,
) -> AffineForwardMap:
    """Affine surrogate of the map behind paired expansions x -> z.

    The matrix is the cross covariance of the expansions times the
    pseudo-inverse of the input covariance; the offset makes the
    surrogate unbiased at the input mean.
    """
    if x.index_set != z.index_set:
        raise ValueError("expansions must share one index set")
    x_lin = np.asarray(x_lin, dtype=float).ravel()
    c_x = pce_cov(x)
    c_zx = pce_cov(z, x)
    c_x_pinv, dropped = _pinv(c_x, pinv_rcond)
    h_mat = c_zx @ c_x_pinv
    offset = pce_mean(z) - h_mat @ (pce_mean(x) - x_lin)
    if eps_var is None:
        eps_var = np.zeros(z.n_outputs)
    fm = AffineForwardMap(h_mat, offset, x_lin, eps_var)
    if dropped:
        fm.flags.append("rank-deficient input covariance, pseudo-inverse truncated")
    return fm


def estimate_forward_map_bayes(
    x_samples: np.ndarray,
    z_samples: np.ndarray,
    x_lin: np.ndarray,
    prior_mean: np.ndarray | None = None,
    config: RvmConfig | None = None,
) -> AffineForwardMap:
    """Affine surrogate by sparse Bayesian regression of sampled pairs.

    Each output row regresses on [1, (x - x_lin)]. When ``prior_mean``
    (an (m, d) matrix) is given, the regression acts on the residual
    after removing the prior-mean map, so a data set generated exactly by
    the prior mean prunes every weight.
    """
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=float))
    z_samples = np.atleast_2d(np.asarray(z_samples, dtype=float))
    if z_samples.shape[0] != x_samples.shape[0]:
        raise ValueError("x and z sample counts differ")
    n, d = x_samples.shape
    m = z_samples.shape[1]
    if n < d + 2:
        raise ValueError(f"need at least {d + 2} samples for a {d}-input affine fit")
    x_lin = np.asarray(x_lin, dtype=float).ravel()
    if prior_mean is None:
        prior_mean = np.zeros((m, d))
    prior_mean = np.atleast_2d(np.asarray(prior_mean, dtype=float))

    centered = x_samples - x_lin
    design = DesignMatrix(np.hstack([np.ones((n, 1)), centered]))
    h_mat = np.empty((m, d))
    offset = np.empty(m)
    eps_var = np.empty(m)
    flags: list[str] = []
    for j in range(m):
        base = centered @ prior_mean[j]
        resid = z_samples[:, j] - base
        shift = float(resid.mean())
        result = rvm_fit(design, resid - shift, config)
        h_mat[j] = prior_mean[j] + result.weights[1:]
        offset[j] = shift + result.weights[0]
        eps_var[j] = result.noise_var
        if not result.converged:
            flags.append(f"row {j}: regression hit the iteration cap")
    fm = AffineForwardMap(h_mat, offset, x_lin, eps_var)
    fm.flags.extend(flags)
    return fm


def estimate_inverse_map(
    x_f: PCExpansion | None,
    y: PCExpansion | None,
    mode: str = "projection",
    x_samples: np.ndarray | None = None,
    y_samples: np.ndarray | None = None,
    rvm_config: RvmConfig | None = None,
    pinv_rcond: float = 1e-10,
) -> AffineInverseMap:
    """Gain-form regression of the state on the predicted observation.

    Projection mode works on the expansions (gain = cross covariance times
    observation-covariance pseudo-inverse). Bayes mode regresses paired
    samples on [1, y] with one sparse regression per state row.
    """
    if mode == "projection":
        if x_f is None or y is None:
            raise ValueError("projection mode needs both expansions")
        c_xy = pce_cov(x_f, y)
        c_y = pce_cov(y)
        c_y_pinv, dropped = _pinv(c_y, pinv_rcond)
        gain = c_xy @ c_y_pinv
        offset = pce_mean(x_f) - gain @ pce_mean(y)
        im = AffineInverseMap(gain, offset)
        if dropped:
            im.flags.append("rank-deficient observation covariance, pseudo-inverse truncated")
        return im
    if mode != "bayes":
        raise ValueError(f"unknown map mode {mode!r}")
    if x_samples is None or y_samples is None:
        raise ValueError("bayes mode needs paired samples")
    x_samples = np.atleast_2d(np.asarray(x_samples, dtype=float))
    y_samples = np.atleast_2d(np.asarray(y_samples, dtype=float))
    n, m = y_samples.shape
    d = x_samples.shape[1]
    y_mean = y_samples.mean(axis=0)
    design = DesignMatrix(np.hstack([np.ones((n, 1)), y_samples - y_mean]))
    gain = np.empty((d, m))
    offset = np.empty(d)
    eps_var = np.empty(d)
    flags: list[str] = []
    for j in range(d):
        target = x_samples[:, j]
        shift = float(target.mean())
        result = rvm_fit(design, target - shift, rvm_config)
        gain[j] = result.weights[1:]
        offset[j] = shift + result.weights[0] - gain[j] @ y_mean
        eps_var[j] = result.noise_var
        if not result.converged:
            flags.append(f"row {j}: regression hit the iteration cap")
    im = AffineInverseMap(gain, offset, eps_var)
    im.flags.extend(flags)
    return im


def posterior_cov_rv(
    c_xf: np.ndarray,
    c_xy: np.ndarray,
    c_y: np.ndarray,
    c_meas: np.ndarray,
    pinv_rcond: float = 1e-10,
    flags: list[str] | None = None,
) -> np.ndarray:
    """Posterior covariance of the random-variable pseudo-measurement update.

    With gain K built from ``c_xy`` and ``c_y``, returns
    ``c_xf + K (c_meas - c_y) K^T``: the forecast covariance is inflated
    or deflated by however much the pseudo-measurement's own spread
    differs from the predicted-observation spread. Mildly negative
    eigenvalues (numerical) are clamped and flagged.
    """
    c_xf = np.atleast_2d(np.asarray(c_xf, dtype=float))
    c_y_pinv, _ = _pinv(np.atleast_2d(c_y), pinv_rcond)
    gain = np.atleast_2d(c_xy) @ c_y_pinv
    out = c_xf + gain @ (np.atleast_2d(c_meas) - np.atleast_2d(c_y)) @ gain.T
    out = 0.5 * (out + out.T)
    eigvals, eigvecs = np.linalg.eigh(out)
    floor = -1e-10 * max(float(np.max(np.abs(eigvals))), 1e-300)
    if np.any(eigvals < floor) and flags is not None:
        flags.append("posterior covariance indefinite beyond tolerance, clamped")
    if np.any(eigvals < 0):
        out = (eigvecs * np.maximum(eigvals, 0.0)) @ eigvecs.T
        out = 0.5 * (out + out.T)
    return out


# ---------------------------------------------------------------------------
# the Gauss-Newton update
# ---------------------------------------------------------------------------


def _noise_block(
    base_cov: np.ndarray,
    eps_var: np.ndarray,
    germ_dim: int,
    offset: int,
    index_set: MultiIndexSet,
) -> PCExpansion:
    total = np.atleast_2d(base_cov) + np.diag(eps_var)
    noise = GaussianDensity(np.zeros(total.shape[0]), total).as_expansion()
    return embed_expansion(noise, germ_dim, offset, index_set)


def _standardized_germ(n: int, dim: int, seed) -> np.ndarray:
    """Germ draw whitened to exact zero mean and identity covariance.

    Sampling noise in the germ's first two moments feeds straight into
    the estimated gains and contracts the posterior a little at every
    update; whitening removes that bias without raising the sample count.
    """
    xi = sample_germ(n, dim, seed)
    if n <= dim + 1:
        return xi
    xs = xi - xi.mean(axis=0)
    cov = xs.T @ xs / n
    lower = np.linalg.cholesky(cov)
    return xs @ np.linalg.inv(lower).T


def gnmk_iterate(
    x_f: PCExpansion,
    y_mes: np.ndarray | GaussianDensity | PCExpansion,
    window_map: Callable[[np.ndarray], np.ndarray],
    model: MeasurementModel,
    cfg: FilterConfig | None = None,
) -> GnmkResult:
    """Iterated Gauss-Newton update of a prior expansion against one measurement.

    Parameters
    ----------
    x_f : PCExpansion
        Prior state on a Hermite germ.
    y_mes : ndarray, GaussianDensity or PCExpansion
        A plain vector uses ``model.noise_cov`` as measurement noise. A
        GaussianDensity is a pseudo-measurement: its mean is the measured
        value, its covariance the pseudo-noise. A PCExpansion is a
        random-variable pseudo-measurement carried on its own germ block;
        the innovation then keeps its full fluctuation.
    window_map : callable
        Ensemble propagator (n, d) -> (n, d) over the update window; the
        measurement selector is applied to its output.
    model : MeasurementModel
    cfg : FilterConfig

    Returns
    -------
    GnmkResult
        The posterior lives on the combined germ
        [state | pseudo-measurement (if any) | noise].

    Notes
    -----
    Each iteration refits the propagated observation as an expansion,
    re-estimates the affine forward map at the current posterior mean,
    rebuilds the linearized observation prediction from the prior, and
    applies the gain coefficient-wise. The reported iteration count is
    the number of updates that moved the mean by at least ``cfg.tol``
    (relative), so an exactly linear problem reports one iteration. The
    divergence guard trips after three consecutive error increases.
    """
    if cfg is None:
        cfg = FilterConfig()
    d = x_f.germ_dim
    n_state = x_f.n_outputs
    m = model.n_observed

    mes_expansion: PCExpansion | None = None
    if isinstance(y_mes, PCExpansion):
        mes_expansion = y_mes
        y_vec = None
        noise_base = model.noise_cov
    elif isinstance(y_mes, GaussianDensity):
        y_vec = y_mes.mean
        noise_base = y_mes.cov + model.noise_cov
    else:
        y_vec = np.asarray(y_mes, dtype=float).ravel()
        noise_base = model.noise_cov
    if y_vec is not None and y_vec.shape[0] != m:
        raise ValueError("measured vector length does not match the selector")
    if mes_expansion is not None and mes_expansion.n_outputs != m:
        raise ValueError("pseudo-measurement outputs do not match the selector")
    if max(model.selected) >= n_state:
        raise ValueError("selector index exceeds state dimension")

    d_m = mes_expansion.germ_dim if mes_expansion is not None else 0
    p_work = max(
        cfg.order,
        x_f.index_set.order,
        mes_expansion.index_set.order if mes_expansion is not None else 1,
    )
    germ_dim = d + d_m + m
    index_set = total_degree_index_set(germ_dim, p_work)
    xi = _standardized_germ(cfg.n_samples, germ_dim, cfg.seed)

    x_f_emb = embed_expansion(x_f, germ_dim, 0, index_set)
    mes_emb = (
        embed_expansion(mes_expansion, germ_dim, d, index_set)
        if mes_expansion is not None
        else None
    )
    x_f_samples = pce_eval(x_f_emb, xi)

    x_a = x_f_emb.copy()
    x_lin = pce_mean(x_a)
    means = [x_lin]
    errs: list[float] = []
    flags: list[str] = []
    iterations = 0
    converged = False
    diverged = False
    forward_map: AffineForwardMap | None = None
    inverse_map: AffineInverseMap | None = None
    eps_var = np.zeros(m)

    for _ in range(cfg.max_iter):
        x_samples = pce_eval(x_a, xi)
        try:
            propagated = window_map(x_samples)
        except IntegrationError as exc:
            diverged = True
            flags.append(f"window propagation failed: {exc}")
            break
        z_samples = model.select(propagated)
        if not np.all(np.isfinite(z_samples)):
            diverged = True
            flags.append("window propagation produced non-finite values")
            break

        # The observation fit is kept below the sample budget on purpose:
        # an interpolating fit would report a vanishing residual and hide
        # the linearization error that has to stabilize the gain.
        fit_order = min(cfg.obs_fit_order, p_work)
        if fit_order == p_work:
            z_exp, z_fits = fit_pce_full(
                xi, z_samples, HermiteBasis(), p_work, cfg.rvm, index_set=index_set
            )
        else:
            z_small, z_fits = fit_pce_full(
                xi, z_samples, HermiteBasis(), fit_order, cfg.rvm
            )
            z_exp = embed_expansion(z_small, germ_dim, 0, index_set)
        eps_var = np.array([r.noise_var for r in z_fits])

        if cfg.map_mode == "projection":
            forward_map = estimate_forward_map_projection(
                x_a, z_exp, x_lin, cfg.pinv_rcond, eps_var=eps_var
            )
        else:
            prior_mean_h = None
            if inverse_map is not None:
                prior_mean_h, _ = _pinv(inverse_map.gain, cfg.pinv_rcond)
            forward_map = estimate_forward_map_bayes(
                x_samples, z_samples, x_lin, prior_mean_h, cfg.rvm
            )

        y_ell = affine_of_expansion(
            forward_map.matrix,
            x_f_emb,
            shift=forward_map.offset - forward_map.matrix @ forward_map.linearization,
        )
        noise_emb = _noise_block(noise_base, eps_var, germ_dim, d + d_m, index_set)
        y_ell = combine_expansions(y_ell, noise_emb)

        if cfg.map_mode == "projection":
            inverse_map = estimate_inverse_map(
                x_f_emb, y_ell, "projection", pinv_rcond=cfg.pinv_rcond
            )
        else:
            inverse_map = estimate_inverse_map(
                None,
                None,
                "bayes",
                x_samples=x_f_samples,
                y_samples=pce_eval(y_ell, xi),
                rvm_config=cfg.rvm,
            )

        if mes_emb is not None:
            innovation = combine_expansions(mes_emb, y_ell, sign=-1.0)
        else:
            inn_coeffs = -y_ell.coeffs
            inn_coeffs[:, 0] += y_vec
            innovation = PCExpansion(inn_coeffs, index_set, HermiteBasis())

        new_coeffs = x_f_emb.coeffs + inverse_map.gain @ innovation.coeffs
        x_a = PCExpansion(new_coeffs, index_set, HermiteBasis())

        mean_new = pce_mean(x_a)
        denom = float(np.linalg.norm(means[-1]))
        change = float(np.linalg.norm(mean_new - means[-1]))
        if denom > 0.0:
            err = change / denom
        elif change == 0.0:
            err = 0.0
        else:
            # a move away from an exactly zero mean is a full relative change
            err = 1.0
        means.append(mean_new)
        errs.append(err)
        x_lin = mean_new

        if err < cfg.tol:
            converged = True
            break
        iterations += 1
        if not math.isfinite(err):
            diverged = True
            flags.append("relative mean change became non-finite")
            break
        if len(errs) >= 4 and errs[-1] > errs[-2] > errs[-3] > errs[-4]:
            diverged = True
            flags.append(
                "divergence guard: relative mean change grew three consecutive iterations"
            )
            break

    if not converged and not diverged:
        flags.append("no convergence within max_iter")

    return GnmkResult(
        posterior=x_a,
        iterations=iterations,
        converged=converged,
        diverged=diverged,
        mean_history=np.array(means),
        err_history=np.array(errs),
        forward_map=forward_map,
        inverse_map=inverse_map,
        eps_var=eps_var,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# smoothers
# ---------------------------------------------------------------------------


@dataclass
class SmootherProblem:
    """Everything a smoothing run needs besides the algorithm knobs.

    ``propagate(states, t_start, t_end)`` advances an ensemble in model
    time; ``prior_at(t)`` yields the unconditioned prior expansion at a
    report time; the measurement ``y_mes`` with ``model`` applies at
    ``final_time``.
    """

    propagate: Callable[[np.ndarray, float, float], np.ndarray]
    prior_at: Callable[[float], PCExpansion]
    y_mes: np.ndarray
    model: MeasurementModel
    t0: float
    final_time: float

    def __post_init__(self) -> None:
        self.y_mes = np.asarray(self.y_mes, dtype=float).ravel()
        if self.final_time < self.t0:
            raise ValueError("final_time must be >= t0")


@dataclass
class SmootherStep:
    """Posterior and diagnostics at one report time."""

    time: float
    posterior: PCExpansion
    iterations: int
    converged: bool
    diverged: bool
    err_history: np.ndarray
    linearization: np.ndarray
    bias_correction: np.ndarray | None = None
    reexpanded: PCExpansion | None = None
    flags: list[str] = field(default_factory=list)


@dataclass
class SmootherResult:
    method: str
    steps: list[SmootherStep]
    flags: list[str] = field(default_factory=list)

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.steps)

    def step_at(self, time: float, atol: float = 1e-9) -> SmootherStep:
        for s in self.steps:
            if abs(s.time - time) <= atol:
                return s
        raise KeyError(f"no smoother step at time {time}")


def report_times(t0: float, final_time: float, delta_tau: float) -> np.ndarray:
    """Grid t0, t0+delta_tau, ..., final_time; the step must divide the span.

    A zero-length window yields the single time t0 (degenerate smoothing,
    one linear update at the measurement time).
    """
    if final_time == t0:
        return np.array([t0], dtype=float)
    if delta_tau is None or delta_tau <= 0:
        raise ValueError("delta_tau must be a positive number")
    span = final_time - t0
    n = span / delta_tau
    n_int = int(round(n))
    if n_int < 1 or abs(n - n_int) > 1e-9 * max(1.0, abs(n)):
        raise ValueError(
            f"delta_tau {delta_tau} does not divide the window [{t0}, {final_time}]"
        )
    return t0 + delta_tau * np.arange(n_int + 1)


def _window(problem: SmootherProblem, t_start: float, t_end: float):
    def apply(states: np.ndarray) -> np.ndarray:
        return problem.propagate(states, t_start, t_end)

    return apply


def _step_from_result(tt: float, res: GnmkResult) -> SmootherStep:
    return SmootherStep(
        time=tt,
        posterior=res.posterior,
        iterations=res.iterations,
        converged=res.converged,
        diverged=res.diverged,
        err_history=res.err_history,
        linearization=res.mean_history[-1],
        flags=list(res.flags),
    )


def direct_smooth(problem: SmootherProblem, cfg: FilterConfig) -> SmootherResult:
    """Condition the state at every report time directly on the terminal data.

    Each report time gets its own Gauss-Newton run whose window spans from
    that time to the measurement time, so the steps are mutually
    independent (and independently flagged).
    """
    times = report_times(problem.t0, problem.final_time, cfg.delta_tau)
    steps = []
    flags: list[str] = []
    for k, tt in enumerate(times):
        step_cfg = replace(cfg, seed=cfg.seed + k)
        res = gnmk_iterate(
            problem.prior_at(tt),
            problem.y_mes,
            _window(problem, tt, problem.final_time),
            problem.model,
            step_cfg,
        )
        step = _step_from_result(float(tt), res)
        steps.append(step)
        flags.extend(f"t={tt:g}: {f}" for f in res.flags)
    return SmootherResult(method="ds", steps=steps, flags=flags)


def bias_correct(
    x_prev_post: PCExpansion,
    x_mes_mean: np.ndarray,
    forward_map: AffineForwardMap,
    gain: np.ndarray,
    pinv_rcond: float = 1e-10,
) -> tuple[np.ndarray, list[str]]:
    """Mean-bias estimate of a converged backward pseudo-update.

    Predictor-corrector: the converged posterior is pushed forward through
    the converged affine window surrogate to a forecast at the
    pseudo-measurement time, then re-assimilated against the same
    pseudo-measurement with the same gain. For a forecast consistent with
    the measurement the two coincide; otherwise the expected difference
    equals (gain x matrix) times the posterior's mean bias, which is
    inverted here.
    """
    flags: list[str] = []
    x_mes_mean = np.asarray(x_mes_mean, dtype=float).ravel()
    forecast_mean = forward_map.predict(pce_mean(x_prev_post))
    diff = np.asarray(gain) @ (forecast_mean - x_mes_mean)  # E(x^f - x^a)
    kh = np.asarray(gain) @ forward_map.matrix
    kh_pinv, dropped = _pinv(kh, pinv_rcond)
    if dropped:
        flags.append("gain-map product singular, pseudo-inverse substituted")
    return kh_pinv @ diff, flags


def _shift_mean(expansion: PCExpansion, shift: np.ndarray) -> PCExpansion:
    out = expansion.copy()
    out.coeffs[:, 0] = out.coeffs[:, 0] + shift
    return out


def ps1_smooth(problem: SmootherProblem, cfg: FilterConfig) -> SmootherResult:
    """Backward smoothing with Gaussian pseudo-measurements.

    The terminal state is updated against the real measurement (a linear
    update); each earlier report time is then updated against the
    gaussianized previous posterior, whose mean acts as the measured value
    and whose covariance as pseudo-noise. With ``cfg.bias_correct`` the
    posterior mean of every backward step is corrected by the estimated
    pseudo-update bias before being reported or passed further back.
    """
    times = report_times(problem.t0, problem.final_time, cfg.delta_tau)
    n_state = problem.prior_at(times[-1]).n_outputs
    res_t = gnmk_iterate(
        problem.prior_at(times[-1]),
        problem.y_mes,
        _window(problem, times[-1], times[-1]),
        problem.model,
        cfg,
    )
    steps = [_step_from_result(float(times[-1]), res_t)]
    flags = [f"t={times[-1]:g}: {f}" for f in res_t.flags]
    posterior = res_t.posterior

    full_model = MeasurementModel.full_state(n_state)
    for k, tt in enumerate(reversed(times[:-1])):
        pseudo = gaussianize(posterior)
        step_cfg = replace(cfg, seed=cfg.seed + 1 + k)
        res = gnmk_iterate(
            problem.prior_at(float(tt)),
            pseudo,
            _window(problem, float(tt), float(tt) + cfg.delta_tau),
            full_model,
            step_cfg,
        )
        posterior = res.posterior
        step = _step_from_result(float(tt), res)
        if cfg.bias_correct and res.forward_map is not None and res.inverse_map is not None:
            e_bar, bflags = bias_correct(
                posterior,
                pseudo.mean,
                res.forward_map,
                res.inverse_map.gain,
                cfg.pinv_rcond,
            )
            posterior = _shift_mean(posterior, -e_bar)
            step.posterior = posterior
            step.bias_correction = e_bar
            step.flags.extend(bflags)
        steps.append(step)
        flags.extend(f"t={tt:g}: {f}" for f in res.flags)

    steps.sort(key=lambda s: s.time)
    return SmootherResult(method="ps1", steps=steps, flags=flags)


def _nonlinear_mass_ratio(expansion: PCExpansion) -> float:
    weights = expansion.basis.norm_sq(expansion.index_set)
    degrees = expansion.index_set.array().sum(axis=1)
    var_mass = (expansion.coeffs**2 * weights)[:, degrees >= 1]
    total = float(np.sum(var_mass))
    nonlin = float(np.sum((expansion.coeffs**2 * weights)[:, degrees >= 2]))
    if total <= 0.0:
        return 0.0
    return nonlin / total


def _reexpand_posterior(
    posterior: PCExpansion, cfg: FilterConfig, seed: int
) -> tuple[PCExpansion, list[str]]:
    """Rebuild a posterior on a fresh germ of dimension = state dimension.

    An (effectively) Gaussian posterior transfers exactly through its
    first two moments. Otherwise the posterior is sampled, gaussianized
    by a Nataf map, refit as a Hermite expansion on the mapped
    coordinates, and validated by a KL check per component.
    """
    flags: list[str] = []
    if _nonlinear_mass_ratio(posterior) <= cfg.gaussian_tol:
        return gaussianize(posterior).as_expansion(), flags

    rng = np.random.default_rng(seed)
    xi = sample_germ(cfg.reexpand_samples, posterior.germ_dim, rng)
    values = pce_eval(posterior, xi)
    transform = nataf_fit(values)
    flags.extend(f"gaussianization: {f}" for f in transform.flags)
    theta = nataf_apply(transform, values)
    refit = reexpand_hermite(theta, values, cfg.order, cfg.rvm)

    # The raw posterior's first two moments are known exactly from its
    # coefficients, so restore them: sampling noise and order truncation
    # both deflate the refit variance slightly, and the deficit compounds
    # over chained re-expansions.
    v_raw = np.diag(pce_cov(posterior))
    v_fit = np.diag(pce_cov(refit))
    good = v_fit > 0.0
    scale = np.where(good, np.sqrt(v_raw / np.where(good, v_fit, 1.0)), 1.0)
    coeffs = refit.coeffs.copy()
    coeffs[:, 1:] *= scale[:, None]
    coeffs[:, 0] = pce_mean(posterior)
    refit = PCExpansion(coeffs, refit.index_set, refit.basis)

    check = pce_eval(refit, sample_germ(cfg.reexpand_samples, refit.germ_dim, rng))
    for j in range(values.shape[1]):
        kl = kl_check(check[:, j], values[:, j])
        if kl > cfg.kl_tolerance:
            flags.append(
                f"re-expansion KL divergence {kl:.3g} above {cfg.kl_tolerance:g} "
                f"for component {j}"
            )
    return refit, flags


def ps2_smooth(problem: SmootherProblem, cfg: FilterConfig) -> SmootherResult:
    """Backward smoothing with random-variable pseudo-measurements.

    As ``ps1_smooth``, but the previous posterior enters the next backward
    step in full, on its own germ block, so the posterior covariance picks
    up the pseudo-measurement's complete second-order structure instead of
    a noise-style Gaussian surrogate. After every step the posterior is
    re-expanded onto a fresh germ of state dimension to stop germ growth.
    """
    times = report_times(problem.t0, problem.final_time, cfg.delta_tau)
    n_state = problem.prior_at(times[-1]).n_outputs
    res_t = gnmk_iterate(
        problem.prior_at(times[-1]),
        problem.y_mes,
        _window(problem, times[-1], times[-1]),
        problem.model,
        cfg,
    )
    step_t = _step_from_result(float(times[-1]), res_t)
    pseudo, rflags = _reexpand_posterior(res_t.posterior, cfg, seed=cfg.seed + 104729)
    step_t.reexpanded = pseudo
    step_t.flags.extend(rflags)
    steps = [step_t]
    flags = [f"t={times[-1]:g}: {f}" for f in res_t.flags + rflags]

    full_model = MeasurementModel.full_state(n_state)
    for k, tt in enumerate(reversed(times[:-1])):
        step_cfg = replace(cfg, seed=cfg.seed + 1 + k)
        res = gnmk_iterate(
            problem.prior_at(float(tt)),
            pseudo,
            _window(problem, float(tt), float(tt) + cfg.delta_tau),
            full_model,
            step_cfg,
        )
        step = _step_from_result(float(tt), res)
        pseudo, rflags = _reexpand_posterior(
            res.posterior, cfg, seed=cfg.seed + 104729 + 7919 * (k + 1)
        )
        step.reexpanded = pseudo
        step.flags.extend(rflags)
        steps.append(step)
        flags.extend(f"t={tt:g}: {f}" for f in res.flags + rflags)

    steps.sort(key=lambda s: s.time)
    return SmootherResult(method="ps2", steps=steps, flags=flags)
