"""Data-driven germs and basis adaptation.

Long nonlinear propagation drives the state distribution away from
anything a fixed Hermite expansion represents well. The tools here
rebuild a usable germ from samples: smoothed marginal CDFs, a Nataf map
to decorrelated standard normals, empirical orthonormalization of
monomial features, and a KL divergence check that tells the adaptive
chain when its current anchor has gone stale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import PchipInterpolator
from scipy.linalg import cholesky, solve_triangular
from scipy.stats import gaussian_kde, norm

from .pce import HermiteBasis, MultiIndexSet, PCExpansion, total_degree_index_set
from .sparse_bayes import RvmConfig, fit_pce

__all__ = [
    "EmpiricalCdf",
    "fit_cdf",
    "NatafTransform",
    "nataf_fit",
    "nataf_apply",
    "mgs_orthonormalize",
    "build_nmap_features",
    "reexpand_hermite",
    "kl_check",
]


@dataclass
class EmpiricalCdf:
    """Smoothed one-dimensional CDF with a monotone normal-score map.

    Nodes sit at sample quantiles whose probabilities are chosen so the
    corresponding normal scores are evenly spaced; a monotone cubic
    interpolates between them. Evaluation outside the grid is clamped to
    the end values.
    """

    grid: np.ndarray
    scores: np.ndarray
    n_samples: int
    degenerate: bool = False
    center: float = 0.0
    _interp: PchipInterpolator | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not self.degenerate and self._interp is None:
            self._interp = PchipInterpolator(self.grid, self.scores, extrapolate=False)

    def normal_score(self, x: np.ndarray) -> np.ndarray:
        """Map data values to standard-normal scores z with F(x) = Phi(z)."""
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return np.zeros_like(x)
        clamped = np.clip(x, self.grid[0], self.grid[-1])
        return np.asarray(self._interp(clamped), dtype=float)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        return norm.cdf(self.normal_score(x))


def fit_cdf(samples: np.ndarray, n_grid: int = 257) -> EmpiricalCdf:
    """Fit a smoothed CDF / normal-score map to scalar samples.

    Parameters
    ----------
    samples : ndarray, shape (n,)
    n_grid : int
        Number of interpolation nodes, spaced evenly in score space.

    Returns
    -------
    EmpiricalCdf
    """
    zeta = np.asarray(samples, dtype=float).ravel()
    if zeta.size < 2:
        raise ValueError("need at least 2 samples to fit a CDF")
    if not np.all(np.isfinite(zeta)):
        raise ValueError("samples contain non-finite values")
    n = zeta.size
    if zeta.max() == zeta.min():
        # constant data; the score map collapses to zero
        return EmpiricalCdf(
            grid=np.array([zeta.min(), zeta.min() + 1.0]),
            scores=np.zeros(2),
            n_samples=n,
            degenerate=True,
            center=float(zeta.mean()),
        )

    # Rank-matching construction. A fixed-bandwidth kernel CDF distorts
    # sharply skewed marginals (it oversmooths the dense side and leaks
    # mass past the support edge), while the quantile map is
    # shape-agnostic: samples come out standard normal to O(1/n) no
    # matter what law they were drawn from. Nodes are spaced evenly in
    # the score so every interpolation segment covers the same small
    # slice of the output range, tails included.
    p_edge = 0.625 / (n + 0.25)
    scores = np.linspace(norm.ppf(p_edge), norm.ppf(1.0 - p_edge), n_grid)
    nodes = np.quantile(zeta, norm.cdf(scores))

    # ties in the data collapse neighboring quantiles; keep one node per
    # distinct value with the mean score of its block
    uniq, inverse = np.unique(nodes, return_inverse=True)
    if uniq.size < nodes.size:
        block_sum = np.zeros(uniq.size)
        np.add.at(block_sum, inverse, scores)
        nodes = uniq
        scores = block_sum / np.bincount(inverse)

    return EmpiricalCdf(
        grid=nodes,
        scores=scores,
        n_samples=n,
        center=float(zeta.mean()),
    )


@dataclass
class NatafTransform:
    """Componentwise normal-score map followed by linear decorrelation."""

    marginals: list[EmpiricalCdf]
    correlation: np.ndarray
    cholesky_lower: np.ndarray
    flags: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return nataf_apply(self, values)


def _safe_cholesky(corr: np.ndarray, flags: list[str]) -> np.ndarray:
    try:
        return cholesky(corr, lower=True)
    except np.linalg.LinAlgError:
        pass
    jittered = corr + 1e-10 * np.eye(corr.shape[0])
    try:
        low = cholesky(jittered, lower=True)
        flags.append("correlation matrix jittered for factorization")
        return low
    except np.linalg.LinAlgError:
        pass
    # nearly singular correlation (components almost deterministically
    # related); clip the spectrum and renormalize the diagonal
    eigvals, eigvecs = np.linalg.eigh(corr)
    eigvals = np.maximum(eigvals, 1e-12)
    rebuilt = eigvecs @ np.diag(eigvals) @ eigvecs.T
    d = np.sqrt(np.diag(rebuilt))
    rebuilt = rebuilt / np.outer(d, d)
    flags.append("correlation spectrum clipped for factorization")
    return cholesky(rebuilt + 1e-12 * np.eye(corr.shape[0]), lower=True)


def nataf_fit(samples: np.ndarray) -> NatafTransform:
    """Calibrate a Nataf-style Gaussianization from joint samples.

    Parameters
    ----------
    samples : ndarray, shape (n, d)

    Returns
    -------
    NatafTransform
        Applying it to the calibration samples yields (approximately)
        uncorrelated standard normal columns.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.ndim != 2:
        raise ValueError("samples must be 2-d (n, d)")
    n, d = samples.shape
    flags: list[str] = []
    marginals = [fit_cdf(samples[:, j]) for j in range(d)]
    kappa = np.column_stack(
        [marginals[j].normal_score(samples[:, j]) for j in range(d)]
    )

    if d == 1:
        corr = np.eye(1)
    else:
        corr = np.corrcoef(kappa, rowvar=False)
        bad = ~np.isfinite(corr)
        if np.any(bad):
            flags.append("degenerate component treated as independent")
            corr = np.where(bad, 0.0, corr)
            np.fill_diagonal(corr, 1.0)
    low = _safe_cholesky(corr, flags)
    for m in marginals:
        if m.degenerate and "degenerate marginal" not in flags:
            flags.append("degenerate marginal")
    return NatafTransform(marginals, corr, low, flags)


def nataf_apply(transform: NatafTransform, values: np.ndarray) -> np.ndarray:
    """Push data through the fitted Gaussianization.

    Returns an array of the same shape whose columns are decorrelated
    standard-normal coordinates.
    """
    values = np.asarray(values, dtype=float)
    squeeze = values.ndim == 1
    values = np.atleast_2d(values)
    if values.shape[1] != transform.dim:
        raise ValueError(
            f"values have {values.shape[1]} columns, transform expects {transform.dim}"
        )
    kappa = np.column_stack(
        [transform.marginals[j].normal_score(values[:, j]) for j in range(transform.dim)]
    )
    theta = solve_triangular(transform.cholesky_lower, kappa.T, lower=True).T
    return theta[0] if squeeze else theta


def mgs_orthonormalize(
    design: np.ndarray, drop_tol: float = 1e-10
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Orthonormalize feature columns in the empirical inner product.

    Modified Gram-Schmidt with a re-orthogonalization sweep, using
    <u, v> = mean(u * v) over the sample rows. Columns whose residual
    norm falls below ``drop_tol`` times their original norm are dropped
    as linearly dependent.

    Parameters
    ----------
    design : ndarray, shape (n, p)
        Raw feature evaluations at the samples.
    drop_tol : float

    Returns
    -------
    q : ndarray, shape (n, k)
        Orthonormal columns (empirically unit norm, mutually orthogonal).
    transform : ndarray, shape (p, k)
        Column map with q = design @ transform. Upper triangular on the
        kept columns; the leading (diagonal) coefficient of every kept
        column is positive.
    kept : ndarray, shape (k,)
        Indices of the retained raw columns.
    """
    d = np.atleast_2d(np.asarray(design, dtype=float))
    n, p = d.shape
    inv_n = 1.0 / n
    q_cols: list[np.ndarray] = []
    t_cols: list[np.ndarray] = []
    kept: list[int] = []
    for j in range(p):
        v = d[:, j].copy()
        t = np.zeros(p)
        t[j] = 1.0
        norm0_sq = inv_n * (v @ v)
        if norm0_sq == 0.0:
            continue
        for _ in range(2):  # second sweep restores orthogonality for near-dependent sets
            for qi, ti in zip(q_cols, t_cols):
                r = inv_n * (qi @ v)
                v -= r * qi
                t -= r * ti
        norm_sq = inv_n * (v @ v)
        if norm_sq <= (drop_tol**2) * norm0_sq:
            continue
        scale = 1.0 / np.sqrt(norm_sq)
        q_cols.append(v * scale)
        t_cols.append(t * scale)
        kept.append(j)
    if not kept:
        return np.zeros((n, 0)), np.zeros((p, 0)), np.array([], dtype=int)
    return (
        np.column_stack(q_cols),
        np.column_stack(t_cols),
        np.asarray(kept, dtype=int),
    )


def build_nmap_features(
    values: np.ndarray, order: int, index_set: MultiIndexSet | None = None
) -> tuple[np.ndarray, MultiIndexSet]:
    """Monomial feature matrix of data values, graded-lexicographic order.

    Row r holds prod_j values[r, j]**alpha_j for every multi-index alpha
    of total degree <= order.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if index_set is None:
        index_set = total_degree_index_set(values.shape[1], order)
    alphas = index_set.array()
    feats = np.ones((values.shape[0], len(index_set)))
    for k, alpha in enumerate(alphas):
        for j, a in enumerate(alpha):
            if a:
                feats[:, k] *= values[:, j] ** a
    return feats, index_set


def reexpand_hermite(
    theta_samples: np.ndarray,
    state_samples: np.ndarray,
    order: int,
    config: RvmConfig | None = None,
) -> PCExpansion:
    """Fit a fresh Hermite expansion of states on Gaussianized coordinates.

    ``theta_samples`` are assumed (approximately) standard normal, e.g.
    produced by ``nataf_apply``; the result is a conventional Hermite PCE
    on that germ.
    """
    return fit_pce(theta_samples, state_samples, HermiteBasis(), order, config)


def kl_check(
    samples_p: np.ndarray,
    samples_q: np.ndarray,
    n_grid: int = 801,
) -> float:
    """KL divergence D(p || q) between two scalar sample sets.

    Both densities are kernel estimates (Gaussian kernels, Silverman
    bandwidth) evaluated on a shared grid spanning both samples; the
    integral is a trapezoid rule with the estimated p renormalized on the
    grid. Used to decide when a surrogate's predictive distribution has
    drifted from the data it should reproduce.
    """
    sp = np.asarray(samples_p, dtype=float).ravel()
    sq = np.asarray(samples_q, dtype=float).ravel()
    if sp.size < 2 or sq.size < 2:
        raise ValueError("need at least 2 samples on each side")
    if np.std(sp) == 0.0 or np.std(sq) == 0.0:
        # degenerate inputs: identical constants match, anything else does not
        return 0.0 if (np.std(sp) == np.std(sq) == 0.0 and sp[0] == sq[0]) else np.inf

    kde_p = gaussian_kde(sp, bw_method="silverman")
    kde_q = gaussian_kde(sq, bw_method="silverman")
    lo = min(np.quantile(sp, 1e-4), np.quantile(sq, 1e-4))
    hi = max(np.quantile(sp, 1 - 1e-4), np.quantile(sq, 1 - 1e-4))
    pad = 3.0 * max(kde_p.factor * np.std(sp), kde_q.factor * np.std(sq))
    grid = np.linspace(lo - pad, hi + pad, n_grid)
    p = np.maximum(kde_p(grid), 1e-300)
    q = np.maximum(kde_q(grid), 1e-300)
    mass = trapezoid(p, grid)
    return float(trapezoid(p * np.log(p / q), grid) / mass)
