"""Symmetric-matrix helpers shared by the orthant, moment and fitting code."""

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.linalg import LinAlgError, cho_solve, cholesky, eigh, solve_triangular

from .errors import NonFiniteError, NotPositiveDefiniteError

DEFAULT_RANK_TOL = 1e-9


def _frozen(array: NDArray) -> NDArray:
    array.setflags(write=False)
    return array


def as_vector(values: ArrayLike, dim: int | None = None) -> NDArray:
    vector = np.array(values, dtype=float).reshape(-1)
    if not np.all(np.isfinite(vector)):
        raise NonFiniteError("vector contains NaN or Inf")
    if dim is not None and vector.shape[0] != dim:
        raise ValueError(f"expected a vector of length {dim}, got {vector.shape[0]}")
    return _frozen(vector)


@dataclass(frozen=True, eq=False)
class SymMatrix:
    entries: NDArray

    def __post_init__(self) -> None:
        array = np.array(self.entries, dtype=float)
        if array.ndim == 0:
            array = array.reshape(1, 1)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NonFiniteError("matrix contains NaN or Inf")
        # (a + a.T) / 2 is exactly symmetric: float addition commutes.
        object.__setattr__(self, "entries", _frozen(0.5 * (array + array.T)))

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(np.zeros((dim, dim)))

    @classmethod
    def identity(cls, dim: int) -> "SymMatrix":
        return cls(np.eye(dim))


@dataclass(frozen=True, eq=False)
class SpdMatrix(SymMatrix):
    factor: NDArray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        super().__post_init__()
        try:
            lower = cholesky(self.entries, lower=True)
        except LinAlgError as exc:
            raise NotPositiveDefiniteError("matrix is not positive definite") from exc
        if np.any(np.diag(lower) <= 0.0):
            raise NotPositiveDefiniteError("matrix is not positive definite")
        object.__setattr__(self, "factor", _frozen(lower))

    def solve(self, rhs: ArrayLike) -> NDArray:
        return cho_solve((self.factor, True), np.asarray(rhs, dtype=float))

    def inverse(self) -> NDArray:
        return self.solve(np.eye(self.dim))

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self.factor))))

    def quad_form(self, vector: ArrayLike) -> float:
        """v' M^{-1} v."""
        vector = np.asarray(vector, dtype=float)
        half = solve_triangular(self.factor, vector, lower=True)
        return float(half @ half)


@dataclass(frozen=True, eq=False)
class PsdClassification:
    rank: int
    eigenvalues: NDArray
    basis: NDArray

    @property
    def range_basis(self) -> NDArray:
        return self.basis[:, : self.rank]

    @property
    def null_basis(self) -> NDArray:
        return self.basis[:, self.rank :]


@dataclass(frozen=True, eq=False)
class NotPsd:
    eigenvalue: float
    direction: NDArray


def frobenius_norm(matrix: Union[SymMatrix, ArrayLike]) -> float:
    entries = matrix.entries if isinstance(matrix, SymMatrix) else np.asarray(matrix, float)
    return float(np.sqrt(max(np.trace(entries @ entries), 0.0)))


def classify_psd(
    matrix: SymMatrix, rank_tol: float = DEFAULT_RANK_TOL
) -> Union[PsdClassification, NotPsd]:
    if rank_tol <= 0:
        raise ValueError("rank_tol must be positive")
    norm = frobenius_norm(matrix)
    values, vectors = eigh(matrix.entries)
    order = np.argsort(values)[::-1]
    values = values[order]
    vectors = vectors[:, order]
    if values[-1] < -rank_tol * norm:
        return NotPsd(eigenvalue=float(values[-1]), direction=_frozen(vectors[:, -1].copy()))
    threshold = rank_tol * max(1.0, norm)
    rank = int(np.sum(values > threshold))
    values = np.where(values > threshold, values, 0.0)
    return PsdClassification(rank=rank, eigenvalues=_frozen(values), basis=_frozen(vectors))


def woodbury_quadratic(base: SpdMatrix, vector: ArrayLike) -> float:
    """v'(U + vv')^{-1} v through the rank-one closed form a / (1 + a), a = v'U^{-1}v."""
    vector = as_vector(vector, base.dim)
    quad = base.quad_form(vector)
    if not np.isfinite(quad):
        raise NonFiniteError("quadratic form is not finite")
    return quad / (1.0 + quad)


def vech(matrix: ArrayLike) -> NDArray:
    """Upper triangle, row-major, i <= j."""
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = np.triu_indices(matrix.shape[0])
    return matrix[rows, cols]


def unvech(values: ArrayLike, dim: int) -> NDArray:
    rows, cols = np.triu_indices(dim)
    out = np.zeros((dim, dim))
    out[rows, cols] = values
    out[cols, rows] = values
    return out


def frobenius_weights(dim: int) -> NDArray:
    """Weights that make ||w * vech(M)|| equal ||M||_F."""
    rows, cols = np.triu_indices(dim)
    return np.where(rows == cols, 1.0, np.sqrt(2.0))


def floor_to_psd(matrix: ArrayLike) -> NDArray:
    values, vectors = eigh(np.asarray(matrix, dtype=float))
    values = np.clip(values, 0.0, None)
    floored = (vectors * values) @ vectors.T
    return 0.5 * (floored + floored.T)
