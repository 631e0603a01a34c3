"""Polynomial chaos expansions on Gaussian germs.

A random vector is represented by a coefficient matrix against a finite
polynomial basis in independent standard normal variables (the germ).
Three basis families are supported:

* probabilists' Hermite polynomials (orthogonal under the standard
  normal measure, with known norms),
* empirically orthonormalized polynomial features produced by modified
  Gram-Schmidt (orthonormal under a sampling measure),
* plain monomial features in some reference state (no closed-form
  moments; evaluation only).

First and second moments of Hermite and Gram-Schmidt expansions follow
directly from the coefficients, which is what the filtering layer relies
on.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "MultiIndexSet",
    "total_degree_index_set",
    "HermiteBasis",
    "MgsOrthonormalBasis",
    "NmapMonomialBasis",
    "PCExpansion",
    "GaussianDensity",
    "hermite_eval",
    "pce_eval",
    "pce_mean",
    "pce_cov",
    "sample_germ",
    "gaussianize",
    "ensure_psd",
    "write_pce",
    "read_pce",
    "dump_pce",
    "load_pce",
]

_EVAL_CHUNK = 4096  # rows of the design matrix materialized at once


# ---------------------------------------------------------------------------
# multi-indices
# ---------------------------------------------------------------------------


def _graded_lex_key(alpha: tuple[int, ...]) -> tuple:
    # total degree first, then lexicographic with higher leading exponents first,
    # so (2,0,0) precedes (1,1,0) precedes (0,2,0)
    return (sum(alpha), tuple(-a for a in alpha))


@dataclass(frozen=True)
class MultiIndexSet:
    """An ordered collection of exponent multi-indices over ``dim`` germ
    dimensions.

    Indices are kept in graded lexicographic order with the zero index
    first. ``total_degree_index_set`` builds the complete set of a given
    order; subsets (for example after dropping collinear columns) are
    allowed as long as they preserve the ordering.
    """

    dim: int
    order: int
    indices: tuple[tuple[int, ...], ...]
    _positions: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError(f"germ dimension must be >= 1, got {self.dim}")
        if self.order < 0:
            raise ValueError(f"order must be >= 0, got {self.order}")
        if not self.indices:
            raise ValueError("index set may not be empty")
        if any(len(a) != self.dim for a in self.indices):
            raise ValueError("all multi-indices must have length dim")
        if any(a < 0 for alpha in self.indices for a in alpha):
            raise ValueError("multi-index entries must be non-negative")
        if self.indices[0] != (0,) * self.dim:
            raise ValueError("the zero multi-index must come first")
        keys = [_graded_lex_key(a) for a in self.indices]
        if any(k2 <= k1 for k1, k2 in zip(keys, keys[1:])):
            raise ValueError("multi-indices must be strictly graded-lex ordered")
        if max(sum(a) for a in self.indices) > self.order:
            raise ValueError("an index exceeds the declared order")
        object.__setattr__(
            self, "_positions", {a: i for i, a in enumerate(self.indices)}
        )

    def __len__(self) -> int:
        return len(self.indices)

    def position(self, alpha: tuple[int, ...]) -> int:
        """Column position of a multi-index, or ``KeyError`` if absent."""
        return self._positions[alpha]

    def __contains__(self, alpha: tuple[int, ...]) -> bool:
        return alpha in self._positions

    def array(self) -> np.ndarray:
        return np.array(self.indices, dtype=np.int64)


def total_degree_index_set(dim: int, order: int) -> MultiIndexSet:
    """All multi-indices over ``dim`` variables with total degree <= ``order``.

    The result has ``comb(dim + order, order)`` members, graded-lex
    ordered with the zero index first.
    """
    if dim < 1:
        raise ValueError(f"germ dimension must be >= 1, got {dim}")
    if order < 0:
        raise ValueError(f"order must be >= 0, got {order}")

    def compositions(total: int, parts: int) -> Iterable[tuple[int, ...]]:
        if parts == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in compositions(total - head, parts - 1):
                yield (head,) + tail

    indices: list[tuple[int, ...]] = []
    for degree in range(order + 1):
        indices.extend(compositions(degree, dim))
    result = MultiIndexSet(dim=dim, order=order, indices=tuple(indices))
    assert len(result) == comb(dim + order, order)
    return result


# ---------------------------------------------------------------------------
# basis families
# ---------------------------------------------------------------------------


def _hermite_table(x: np.ndarray, max_order: int) -> np.ndarray:
    """Values He_0..He_max of the probabilists' Hermite polynomials.

    ``x`` has shape (n,), the result (n, max_order + 1), using the
    recurrence He_{k+1}(x) = x He_k(x) - k He_{k-1}(x).
    """
    table = np.empty((x.shape[0], max_order + 1))
    table[:, 0] = 1.0
    if max_order >= 1:
        table[:, 1] = x
    for k in range(1, max_order):
        table[:, k + 1] = x * table[:, k] - k * table[:, k - 1]
    return table


def _monomial_table(x: np.ndarray, max_order: int) -> np.ndarray:
    table = np.empty((x.shape[0], max_order + 1))
    table[:, 0] = 1.0
    for k in range(max_order):
        table[:, k + 1] = x * table[:, k]
    return table


def _product_design(
    points: np.ndarray, index_set: MultiIndexSet, table_fn
) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != index_set.dim:
        raise ValueError(
            f"points have dimension {points.shape[1]}, index set expects {index_set.dim}"
        )
    idx = index_set.array()
    per_dim_order = idx.max(axis=0)
    tables = [table_fn(points[:, d], int(per_dim_order[d])) for d in range(index_set.dim)]
    design = np.ones((points.shape[0], len(index_set)))
    for d in range(index_set.dim):
        design *= tables[d][:, idx[:, d]]
    return design


@dataclass(frozen=True)
class HermiteBasis:
    """Probabilists' Hermite polynomials in a standard normal germ."""

    kind = "hermite"

    def design(self, points: np.ndarray, index_set: MultiIndexSet) -> np.ndarray:
        return _product_design(points, index_set, _hermite_table)

    def norm_sq(self, index_set: MultiIndexSet) -> np.ndarray:
        """E[Psi_alpha^2] = prod(alpha_i!) for each index."""
        idx = index_set.array()
        facts = np.array(
            [math.prod(math.factorial(int(a)) for a in alpha) for alpha in idx],
            dtype=float,
        )
        return facts


@dataclass(frozen=True, eq=False)
class MgsOrthonormalBasis:
    """Polynomial features orthonormalized against an empirical measure.

    ``transform`` maps raw monomial features (columns of the full graded-lex
    monomial design of ``raw_indices``) to the orthonormal ones:
    ``design = monomials @ transform``. The first orthonormal feature is the
    constant one, so the mean-column convention of Hermite expansions holds.
    """

    raw_indices: MultiIndexSet
    transform: np.ndarray

    kind = "mgs"

    def __post_init__(self) -> None:
        t = np.asarray(self.transform, dtype=float)
        if t.ndim != 2 or t.shape[0] != len(self.raw_indices):
            raise ValueError(
                f"transform shape {t.shape} does not match {len(self.raw_indices)} raw features"
            )
        object.__setattr__(self, "transform", t)

    def design(self, points: np.ndarray, index_set: MultiIndexSet) -> np.ndarray:
        if len(index_set) != self.transform.shape[1]:
            raise ValueError(
                "index set cardinality does not match the orthonormalized feature count"
            )
        raw = _product_design(points, self.raw_indices, _monomial_table)
        return raw @ self.transform

    def norm_sq(self, index_set: MultiIndexSet) -> np.ndarray:
        return np.ones(len(index_set))


@dataclass(frozen=True, eq=False)
class NmapMonomialBasis:
    """Plain monomials in a non-Gaussian reference state.

    ``anchor_id`` names the sample set of the reference state the basis was
    built on; moments are not available in closed form, so expansions in
    this basis support evaluation only.
    """

    anchor_id: str

    kind = "nmap"

    def design(self, points: np.ndarray, index_set: MultiIndexSet) -> np.ndarray:
        return _product_design(points, index_set, _monomial_table)

    def norm_sq(self, index_set: MultiIndexSet) -> np.ndarray:
        raise ValueError(
            "monomial bases in a reference state have no closed-form moments; "
            "re-expand onto a Hermite germ first"
        )


Basis = Union[HermiteBasis, MgsOrthonormalBasis, NmapMonomialBasis]


def _same_basis(a: Basis, b: Basis) -> bool:
    if a is b:
        return True
    if type(a) is not type(b):
        return False
    if isinstance(a, HermiteBasis):
        return True
    if isinstance(a, NmapMonomialBasis):
        return a.anchor_id == b.anchor_id
    return a.raw_indices == b.raw_indices and np.array_equal(a.transform, b.transform)


def hermite_eval(alpha: Sequence[int], points: np.ndarray) -> np.ndarray:
    """Evaluate a single probabilists' Hermite product polynomial.

    ``alpha`` is a multi-index; ``points`` is (n, len(alpha)) or, for
    one-dimensional indices, a plain (n,) array.
    """
    alpha = tuple(int(a) for a in alpha)
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        if len(alpha) != 1:
            points = points.reshape(1, -1)
        else:
            points = points.reshape(-1, 1)
    out = np.ones(points.shape[0])
    for d, a in enumerate(alpha):
        if a:
            out *= _hermite_table(points[:, d], a)[:, a]
    return out


# ---------------------------------------------------------------------------
# expansions
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class PCExpansion:
    """A random vector given by coefficients against a polynomial basis.

    ``coeffs`` has shape (n_outputs, cardinality); column ``j`` multiplies
    basis function ``j`` of ``index_set``.
    """

    coeffs: np.ndarray
    index_set: MultiIndexSet
    basis: Basis

    def __post_init__(self) -> None:
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if c.shape[1] != len(self.index_set):
            raise ValueError(
                f"coefficient columns ({c.shape[1]}) must match the index set "
                f"cardinality ({len(self.index_set)})"
            )
        self.coeffs = c

    @property
    def germ_dim(self) -> int:
        return self.index_set.dim

    @property
    def n_outputs(self) -> int:
        return self.coeffs.shape[0]

    def copy(self) -> "PCExpansion":
        return PCExpansion(self.coeffs.copy(), self.index_set, self.basis)


def pce_eval(expansion: PCExpansion, points: np.ndarray) -> np.ndarray:
    """Evaluate the expansion at germ points.

    Parameters
    ----------
    expansion : PCExpansion
    points : ndarray, shape (n, germ_dim)

    Returns
    -------
    ndarray, shape (n, n_outputs)
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    out = np.empty((n, expansion.n_outputs))
    ct = expansion.coeffs.T
    for start in range(0, n, _EVAL_CHUNK):
        block = points[start : start + _EVAL_CHUNK]
        out[start : start + _EVAL_CHUNK] = expansion.basis.design(
            block, expansion.index_set
        ) @ ct
    return out


def pce_mean(expansion: PCExpansion) -> np.ndarray:
    """Mean of the expansion (the zero-index coefficient column)."""
    if isinstance(expansion.basis, NmapMonomialBasis):
        raise ValueError(
            "mean of a reference-state monomial expansion is not available; "
            "re-expand onto a Hermite germ first"
        )
    return expansion.coeffs[:, 0].copy()


def pce_cov(a: PCExpansion, b: PCExpansion | None = None) -> np.ndarray:
    """Covariance (or cross-covariance) from expansion coefficients.

    Both expansions must share the same germ, basis family and index set;
    the result is ``A_tilde @ diag(E[Psi^2]) @ B_tilde.T`` with the mean
    column excluded.
    """
    if b is None:
        b = a
    if a.index_set is not b.index_set and a.index_set != b.index_set:
        raise ValueError("expansions must share one index set to take covariances")
    if not _same_basis(a.basis, b.basis):
        raise ValueError("expansions must share the same basis")
    weights = a.basis.norm_sq(a.index_set)[1:]
    qa = a.coeffs[:, 1:]
    qb = b.coeffs[:, 1:]
    return (qa * weights) @ qb.T


def sample_germ(n: int, germ_dim: int, seed: int | np.random.Generator) -> np.ndarray:
    """Draw independent standard normal germ samples, shape (n, germ_dim).

    Accepts an integer seed or a ``numpy.random.Generator``; the same seed
    always yields the same draws.
    """
    if n < 1 or germ_dim < 1:
        raise ValueError("need n >= 1 and germ_dim >= 1")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    return rng.standard_normal((n, germ_dim))


# ---------------------------------------------------------------------------
# Gaussian densities
# ---------------------------------------------------------------------------


def ensure_psd(cov: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Symmetrize and clip a nearly-PSD covariance.

    Eigenvalues in ``[-rel_tol * ||cov||, 0)`` are clamped to zero; anything
    more negative raises, since that indicates a genuine algebra error
    rather than numerical fuzz.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    sym = 0.5 * (cov + cov.T)
    scale = float(np.linalg.norm(sym, 2)) if sym.size else 0.0
    if scale == 0.0:
        return sym
    eigvals, eigvecs = np.linalg.eigh(sym)
    floor = -rel_tol * scale
    if eigvals[0] < floor:
        raise ValueError(
            f"matrix is not positive semi-definite: min eigenvalue {eigvals[0]:.3e} "
            f"below tolerance {floor:.3e}"
        )
    if eigvals[0] < 0.0:
        eigvals = np.clip(eigvals, 0.0, None)
        sym = (eigvecs * eigvals) @ eigvecs.T
        sym = 0.5 * (sym + sym.T)
    return sym


@dataclass(eq=False)
class GaussianDensity:
    """Mean vector and PSD covariance, validated on construction."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = ensure_psd(self.cov, rel_tol=1e-10)
        if cov.shape[0] != mean.shape[0]:
            raise ValueError(
                f"mean has dimension {mean.shape[0]} but covariance is {cov.shape}"
            )
        self.mean = mean
        self.cov = cov

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sqrt_factor(self) -> np.ndarray:
        """A matrix L with L @ L.T equal to the covariance.

        Cholesky when the covariance is definite, symmetric eigenvalue
        square root otherwise (covers semi-definite noise, including zero).
        """
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            eigvals, eigvecs = np.linalg.eigh(self.cov)
            return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self.sqrt_factor().T

    def as_expansion(self, order: int = 1) -> PCExpansion:
        """Exact order-1 Hermite expansion of the Gaussian on a fresh germ."""
        index_set = total_degree_index_set(self.dim, max(order, 1))
        coeffs = np.zeros((self.dim, len(index_set)))
        coeffs[:, 0] = self.mean
        factor = self.sqrt_factor()
        for d in range(self.dim):
            alpha = tuple(1 if k == d else 0 for k in range(self.dim))
            coeffs[:, index_set.position(alpha)] = factor[:, d]
        return PCExpansion(coeffs, index_set, HermiteBasis())


def gaussianize(expansion: PCExpansion) -> GaussianDensity:
    """The Gaussian with the expansion's first two moments."""
    mean = pce_mean(expansion)
    cov = ensure_psd(pce_cov(expansion), rel_tol=1e-10)
    return GaussianDensity(mean, cov)


# ---------------------------------------------------------------------------
# coefficient algebra used by the filtering layer
# ---------------------------------------------------------------------------


def embed_expansion(
    expansion: PCExpansion,
    germ_dim: int,
    offset: int,
    index_set: MultiIndexSet | None = None,
) -> PCExpansion:
    """Re-index a Hermite expansion onto a larger germ.

    The original germ dimensions are placed at ``offset`` within the new
    germ; all other dimensions are unused. Coefficients are copied into
    the matching positions of the target index set.
    """
    if not isinstance(expansion.basis, HermiteBasis):
        raise ValueError("only Hermite expansions can be embedded in a larger germ")
    if offset < 0 or offset + expansion.germ_dim > germ_dim:
        raise ValueError("embedding block does not fit inside the target germ")
    if index_set is None:
        index_set = total_degree_index_set(germ_dim, expansion.index_set.order)
    coeffs = np.zeros((expansion.n_outputs, len(index_set)))
    pad_left = (0,) * offset
    pad_right = (0,) * (germ_dim - offset - expansion.germ_dim)
    for j, alpha in enumerate(expansion.index_set.indices):
        target = pad_left + alpha + pad_right
        coeffs[:, index_set.position(target)] = expansion.coeffs[:, j]
    return PCExpansion(coeffs, index_set, expansion.basis)


def affine_of_expansion(
    matrix: np.ndarray, expansion: PCExpansion, shift: np.ndarray | None = None
) -> PCExpansion:
    """The expansion of ``matrix @ X + shift`` for expansion-valued ``X``."""
    coeffs = np.asarray(matrix, dtype=float) @ expansion.coeffs
    if shift is not None:
        coeffs[:, 0] += np.asarray(shift, dtype=float)
    return PCExpansion(coeffs, expansion.index_set, expansion.basis)


def combine_expansions(
    a: PCExpansion, b: PCExpansion, sign: float = 1.0
) -> PCExpansion:
    """Coefficient-wise ``a + sign * b`` for expansions on one index set."""
    if a.index_set != b.index_set:
        raise ValueError("expansions must share one index set")
    return PCExpansion(a.coeffs + sign * b.coeffs, a.index_set, a.basis)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_FORMAT_TAG = "pcsmooth-pce 1"


def _write_float_row(fh: io.TextIOBase, row: np.ndarray) -> None:
    fh.write(" ".join(float(v).hex() for v in row))
    fh.write("\n")


def _read_float_row(line: str, expected: int) -> np.ndarray:
    parts = line.split()
    if len(parts) != expected:
        raise ValueError(f"expected {expected} values per row, got {len(parts)}")
    return np.array([float.fromhex(p) for p in parts])


def dump_pce(expansion: PCExpansion, config_hash: str | None = None) -> str:
    """Serialize an expansion to the self-describing text format.

    Floats are written as C99 hex literals, so a round-trip through
    ``load_pce`` reproduces every coefficient bit for bit.
    """
    fh = io.StringIO()
    fh.write(f"format {_FORMAT_TAG}\n")
    if config_hash is not None:
        fh.write(f"config_hash {config_hash}\n")
    fh.write(f"germ_dim {expansion.germ_dim}\n")
    fh.write(f"order {expansion.index_set.order}\n")
    fh.write(f"basis {expansion.basis.kind}\n")
    if isinstance(expansion.basis, NmapMonomialBasis):
        fh.write(f"anchor_id {expansion.basis.anchor_id}\n")
    fh.write(f"n_outputs {expansion.n_outputs}\n")
    fh.write(f"cardinality {len(expansion.index_set)}\n")
    fh.write("indices\n")
    for alpha in expansion.index_set.indices:
        fh.write(" ".join(str(a) for a in alpha))
        fh.write("\n")
    if isinstance(expansion.basis, MgsOrthonormalBasis):
        raw = expansion.basis.raw_indices
        fh.write(f"raw_order {raw.order}\n")
        fh.write(f"raw_cardinality {len(raw)}\n")
        fh.write("raw_indices\n")
        for alpha in raw.indices:
            fh.write(" ".join(str(a) for a in alpha))
            fh.write("\n")
        fh.write("transform\n")
        for row in expansion.basis.transform:
            _write_float_row(fh, row)
    fh.write("coeffs\n")
    for row in expansion.coeffs:
        _write_float_row(fh, row)
    fh.write("end\n")
    return fh.getvalue()


def load_pce(text: str) -> PCExpansion:
    """Parse the text format produced by ``dump_pce``."""
    lines = text.splitlines()
    pos = 0

    def next_line() -> str:
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise ValueError("unexpected end of serialized expansion")
        line = lines[pos].strip()
        pos += 1
        return line

    def expect_kv(key: str) -> str:
        line = next_line()
        head, _, value = line.partition(" ")
        if head != key:
            raise ValueError(f"expected '{key} ...', got {line!r}")
        return value

    if next_line() != f"format {_FORMAT_TAG}":
        raise ValueError("unrecognized serialization format")
    line = next_line()
    if line.startswith("config_hash "):
        line = next_line()
    head, _, value = line.partition(" ")
    if head != "germ_dim":
        raise ValueError(f"expected 'germ_dim ...', got {line!r}")
    germ_dim = int(value)
    order = int(expect_kv("order"))
    basis_kind = expect_kv("basis")
    anchor_id = expect_kv("anchor_id") if basis_kind == "nmap" else None
    n_outputs = int(expect_kv("n_outputs"))
    cardinality = int(expect_kv("cardinality"))
    if next_line() != "indices":
        raise ValueError("missing 'indices' block")
    indices = []
    for _ in range(cardinality):
        indices.append(tuple(int(v) for v in next_line().split()))
    index_set = MultiIndexSet(dim=germ_dim, order=order, indices=tuple(indices))

    basis: Basis
    if basis_kind == "hermite":
        basis = HermiteBasis()
    elif basis_kind == "nmap":
        basis = NmapMonomialBasis(anchor_id=anchor_id or "")
    elif basis_kind == "mgs":
        raw_order = int(expect_kv("raw_order"))
        raw_cardinality = int(expect_kv("raw_cardinality"))
        if next_line() != "raw_indices":
            raise ValueError("missing 'raw_indices' block")
        raw_indices = []
        for _ in range(raw_cardinality):
            raw_indices.append(tuple(int(v) for v in next_line().split()))
        raw_set = MultiIndexSet(dim=germ_dim, order=raw_order, indices=tuple(raw_indices))
        if next_line() != "transform":
            raise ValueError("missing 'transform' block")
        rows = [_read_float_row(next_line(), cardinality) for _ in range(raw_cardinality)]
        basis = MgsOrthonormalBasis(raw_indices=raw_set, transform=np.array(rows))
    else:
        raise ValueError(f"unknown basis kind {basis_kind!r}")

    if next_line() != "coeffs":
        raise ValueError("missing 'coeffs' block")
    coeffs = np.array([_read_float_row(next_line(), cardinality) for _ in range(n_outputs)])
    if next_line() != "end":
        raise ValueError("missing 'end' marker")
    return PCExpansion(coeffs, index_set, basis)


def write_pce(expansion: PCExpansion, path, config_hash: str | None = None) -> None:
    """Write an expansion to ``path`` in the text serialization format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_pce(expansion, config_hash=config_hash))


def read_pce(path) -> PCExpansion:
    """Read an expansion written by ``write_pce``."""
    with open(path, "r", encoding="utf-8") as fh:
        return load_pce(fh.read())
