"""Difference operators, null spaces and spectra on d-dimensional lattices.

Vertices are ordered row-major over ``(i_1, ..., i_d)`` with axis 1 slowest,
i.e. numpy C order for an array of shape ``dims``. Every flat vector in the
package uses this ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import DimensionError, RankDeficiencyError, SizeLimitError

# m * n limit for dense factorizations of D.
DENSE_LIMIT = 10_000_000


@dataclass(frozen=True)
class LatticeSpec:
    """Shape, per-axis trend order and per-axis wrap flags of a lattice."""

    dims: tuple[int, ...]
    orders: tuple[int, ...]
    wrap: tuple[bool, ...] = ()

    def __post_init__(self):
        dims = tuple(int(N) for N in np.atleast_1d(self.dims))
        orders = tuple(int(k) for k in np.atleast_1d(self.orders))
        wrap = tuple(bool(w) for w in np.atleast_1d(self.wrap)) if len(self.wrap) else (False,) * len(dims)
        if len(orders) == 1 and len(dims) > 1:
            orders = orders * len(dims)
        if not (len(dims) == len(orders) == len(wrap)) or len(dims) < 1:
            raise ValueError(f"dims, orders and wrap must have equal length >= 1, got {dims}, {orders}, {wrap}")
        for N, k, w in zip(dims, orders, wrap):
            if k < 0:
                raise ValueError(f"trend order must be non-negative, got {k}")
            if N < 2:
                raise DimensionError(f"every axis needs at least 2 vertices, got {N}")
            if not w and N <= k + 1:
                raise DimensionError(f"axis of length {N} too short for difference order {k + 1}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "wrap", wrap)

    @property
    def d(self) -> int:
        return len(self.dims)

    @property
    def n(self) -> int:
        return int(np.prod(self.dims))

    @property
    def nullity_per_axis(self) -> tuple[int, ...]:
        return tuple(1 if w else k + 1 for k, w in zip(self.orders, self.wrap))

    @property
    def nullity(self) -> int:
        return int(np.prod(self.nullity_per_axis))

    @classmethod
    def chain(cls, n: int, k: int = 0, wrap: bool = False) -> "LatticeSpec":
        return cls((n,), (k,), (wrap,))

    @classmethod
    def grid(cls, N: int, d: int, k: int = 0) -> "LatticeSpec":
        return cls((N,) * d, (k,) * d, (False,) * d)


@dataclass(frozen=True, eq=False)
class SparseOperator:
    """Immutable sparse linear map backed by a CSR matrix.

    ``full_row_rank`` is a structural hint (1d unwrapped operators) that lets
    callers use banded solves instead of dense factorizations.
    """

    matrix: sp.csr_matrix
    full_row_rank: bool = False
    lambda_max_hint: float | None = None
    spec: "LatticeSpec | None" = None
    _rmat: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        mat = sp.csr_matrix(self.matrix)
        mat.sort_indices()
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "_rmat", mat.T.tocsr())

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        return self._rmat @ y

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Triplet ``(row, col, value)`` expansion of the operator."""
        coo = self.matrix.tocoo()
        return coo.row.copy(), coo.col.copy(), coo.data.copy()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def select_rows(self, rows: np.ndarray) -> "SparseOperator":
        return SparseOperator(self.matrix[np.asarray(rows)], full_row_rank=self.full_row_rank)

    @cached_property
    def lambda_max(self) -> float:
        """Largest eigenvalue of ``D^T D``."""
        if self.lambda_max_hint is not None:
            return float(self.lambda_max_hint)
        G = (self._rmat @ self.matrix)
        if self.n_cols <= 600:
            return float(np.linalg.eigvalsh(G.toarray())[-1])
        from scipy.sparse.linalg import eigsh
        return float(eigsh(G, k=1, which="LA", tol=1e-10, return_eigenvectors=False)[0])


def build_diff_1d(N: int, order: int, wrap: bool = False) -> SparseOperator:
    """Forward difference operator of the given order on a chain of ``N`` vertices.

    Unwrapped operators have ``N - order`` rows and are built by the
    recurrence ``D^(r) = D^(1)_{N-r+1} D^(r-1)``, so first differences read
    ``theta[i+1] - theta[i]``. Wrapped axes use the circulant analogue with
    ``N`` rows (indices taken mod ``N``).
    """
    if order < 1:
        raise ValueError(f"difference order must be >= 1, got {order}")
    if N < 2:
        raise DimensionError(f"need at least 2 vertices, got {N}")
    if wrap:
        eye = sp.identity(N, format="csr")
        shift = sp.csr_matrix((np.ones(N), (np.arange(N), (np.arange(N) + 1) % N)), shape=(N, N))
        first = shift - eye
        D = first
        for _ in range(order - 1):
            D = first @ D
        D.eliminate_zeros()
        return SparseOperator(D.tocsr())
    if N <= order:
        raise DimensionError(f"chain of length {N} too short for difference order {order}")
    D = sp.identity(N, format="csr")
    for r in range(order):
        size = N - r
        first = sp.diags([-np.ones(size - 1), np.ones(size - 1)], [0, 1], shape=(size - 1, size), format="csr")
        D = first @ D
    D.eliminate_zeros()
    return SparseOperator(D.tocsr(), full_row_rank=True)


def build_diff_lattice(spec: LatticeSpec) -> SparseOperator:
    """Stack of axis-wise Kronecker difference blocks ``I ⊗ ... ⊗ D_j ⊗ ... ⊗ I``."""
    blocks = []
    for j, (N, k, w) in enumerate(zip(spec.dims, spec.orders, spec.wrap)):
        Dj = build_diff_1d(N, k + 1, w).matrix
        left = int(np.prod(spec.dims[:j]))
        right = int(np.prod(spec.dims[j + 1:]))
        block = Dj
        if left > 1:
            block = sp.kron(sp.identity(left, format="csr"), block, format="csr")
        if right > 1:
            block = sp.kron(block, sp.identity(right, format="csr"), format="csr")
        blocks.append(block)
    D = sp.vstack(blocks, format="csr")
    full_rank = spec.d == 1 and not spec.wrap[0]
    lam_max = sum(_max_eigenvalue_1d(N, k + 1, w) for N, k, w in zip(spec.dims, spec.orders, spec.wrap))
    return SparseOperator(D, full_row_rank=full_rank, lambda_max_hint=lam_max, spec=spec)


def _max_eigenvalue_1d(N: int, order: int, wrap: bool) -> float:
    if wrap:
        return float(np.max((4.0 * np.sin(np.pi * np.arange(N) / N) ** 2) ** order))
    banded = _banded_gram(N, order)
    return float(sla.eig_banded(banded, lower=False, eigvals_only=True, select="i",
                                select_range=(N - 1, N - 1))[0])


def _banded_gram(N: int, order: int) -> np.ndarray:
    D = build_diff_1d(N, order, wrap=False).matrix
    G = (D.T @ D).todia()
    banded = np.zeros((order + 1, N))
    for off in range(order + 1):
        banded[order - off, off:] = G.diagonal(off)
    return banded


def diff_rows(spec: LatticeSpec) -> int:
    """Row count of the lattice operator without building it."""
    total = 0
    for j, (N, k, w) in enumerate(zip(spec.dims, spec.orders, spec.wrap)):
        rows_1d = N if w else N - k - 1
        total += rows_1d * (spec.n // N)
    return total


@dataclass(frozen=True, eq=False)
class NullSpaceBasis:
    """Orthonormal basis ``Q`` (n x kappa) of the null space of D."""

    Q: np.ndarray

    @property
    def kappa(self) -> int:
        return self.Q.shape[1]

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    def project(self, v: np.ndarray) -> np.ndarray:
        return project_null(self, v)

    def coefficients(self, v: np.ndarray) -> np.ndarray:
        return self.Q.T @ v


def _axis_null_basis(N: int, k: int, wrap: bool) -> np.ndarray:
    degree = 0 if wrap else k
    x = np.linspace(-1.0, 1.0, N)
    V = np.vander(x, degree + 1, increasing=True)
    Q, R, _ = sla.qr(V, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size and diag[-1] <= 1e-10 * diag[0]:
        raise RankDeficiencyError(f"monomial basis of degree {degree} is rank deficient on {N} points")
    return Q


def polynomial_null_basis(spec: LatticeSpec) -> NullSpaceBasis:
    """Orthonormal basis of the tensor-product polynomials annihilated by D.

    Coordinates are rescaled to [-1, 1] per axis and each axis basis is
    orthonormalized by pivoted QR, so the Kronecker product of the axis bases
    is orthonormal. Wrapped axes contribute only the constant.
    """
    factors = [_axis_null_basis(N, k, w) for N, k, w in zip(spec.dims, spec.orders, spec.wrap)]
    Q = reduce(np.kron, factors)
    return NullSpaceBasis(np.ascontiguousarray(Q))


def project_null(basis: NullSpaceBasis, v: np.ndarray) -> np.ndarray:
    """Orthogonal projection ``Q Q^T v`` onto the null space."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != basis.n:
        raise ValueError(f"vector length {v.shape[0]} does not match basis size {basis.n}")
    return basis.Q @ (basis.Q.T @ v)


def eigenvalues_1d(N: int, order: int, wrap: bool = False) -> np.ndarray:
    """Ascending eigenvalues of ``D_1^T D_1`` for one axis.

    Unwrapped operators are banded, so a banded symmetric eigensolver is used;
    wrapped operators are circulant with eigenvalues ``(4 sin^2(pi l / N))^order``.
    The known null directions are set exactly to zero and the rest clamped at 0.
    """
    if wrap:
        ell = np.arange(N)
        rho = np.sort((4.0 * np.sin(np.pi * ell / N) ** 2) ** order)
        nullity = 1
    else:
        rho = np.sort(sla.eig_banded(_banded_gram(N, order), lower=False, eigvals_only=True))
        nullity = order
    rho = np.clip(rho, 0.0, None)
    rho[:nullity] = 0.0
    return rho


@dataclass(frozen=True, eq=False)
class EigenStructure:
    """Per-axis spectra with the Kronecker-sum spectrum of ``D^T D`` kept implicit."""

    rho_per_axis: tuple[np.ndarray, ...]

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(len(r) for r in self.rho_per_axis)

    @property
    def lambda_max(self) -> float:
        return float(sum(r[-1] for r in self.rho_per_axis))

    def xi_sq(self, index: Sequence[int]) -> float:
        """Eigenvalue at a 0-based multi-index: ``sum_j rho_j[i_j]``."""
        return float(sum(r[i] for r, i in zip(self.rho_per_axis, index)))

    def xi_sq_grid(self) -> np.ndarray:
        """Full tensor of eigenvalues with shape ``dims``."""
        return reduce(np.add.outer, self.rho_per_axis)


def kron_sum_eigenvalues(spec: LatticeSpec) -> EigenStructure:
    rhos = tuple(eigenvalues_1d(N, k + 1, w) for N, k, w in zip(spec.dims, spec.orders, spec.wrap))
    return EigenStructure(rhos)


def null_index_mask(spec: LatticeSpec) -> np.ndarray:
    """Boolean mask of multi-indices with zero eigenvalue, i.e. ``[k+1]^d``."""
    grids = np.meshgrid(*[np.arange(N) for N in spec.dims], indexing="ij")
    mask = np.ones(spec.dims, dtype=bool)
    for g, kap in zip(grids, spec.nullity_per_axis):
        mask &= g < kap
    return mask


def ball_index_mask(spec: LatticeSpec, radius: float) -> np.ndarray:
    """Mask of ``{i : ||(i - k - 2)_+||_2 < radius}`` (1-based i), union the null set."""
    grids = np.meshgrid(*[np.arange(1, N + 1) for N in spec.dims], indexing="ij")
    sq = np.zeros(spec.dims)
    for g, k in zip(grids, spec.orders):
        sq += np.clip(g - k - 2, 0, None) ** 2.0
    return (np.sqrt(sq) < radius) | null_index_mask(spec)


def index_mask(spec: LatticeSpec, indices: Iterable[Sequence[int]]) -> np.ndarray:
    """Mask from an explicit collection of 1-based multi-indices."""
    mask = np.zeros(spec.dims, dtype=bool)
    for idx in indices:
        mask[tuple(int(i) - 1 for i in np.atleast_1d(idx))] = True
    return mask


def L_Jp(spec: LatticeSpec, J: np.ndarray | None, p: float, mu: float = 1.0,
         eig: EigenStructure | None = None) -> float:
    """``((mu^2 / n) * sum_{i not in J} xi_i^{-p})^{1/p}``.

    ``J`` is a boolean mask over multi-indices (True = excluded from the sum);
    ``None`` means the null index set.
    """
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if mu < 1:
        raise ValueError(f"incoherence constant must be >= 1, got {mu}")
    if J is None:
        J = null_index_mask(spec)
    J = np.asarray(J, dtype=bool)
    if J.shape != spec.dims:
        raise ValueError(f"index mask shape {J.shape} does not match dims {spec.dims}")
    eig = eig or kron_sum_eigenvalues(spec)
    xi_sq = eig.xi_sq_grid()[~J]
    if xi_sq.size == 0:
        return 0.0
    if np.any(xi_sq <= 0.0):
        raise ZeroDivisionError("index set J does not cover every zero eigenvalue")
    total = np.sum(xi_sq ** (-p / 2.0))
    return float((mu ** 2 / spec.n * total) ** (1.0 / p))


def incoherence_constant(op: SparseOperator, rtol: float = 1e-10) -> float:
    """``max_j ||U_j||_inf * sqrt(m)`` over left singular vectors with nonzero singular value."""
    m, n = op.shape
    if m * n > DENSE_LIMIT:
        raise SizeLimitError(f"dense SVD of a {m} x {n} operator exceeds the desk-scale limit")
    U, s, _ = np.linalg.svd(op.toarray(), full_matrices=False)
    keep = s > rtol * s.max()
    return float(np.abs(U[:, keep]).max() * np.sqrt(m))


def null_space_of_rows(D: SparseOperator, rows: np.ndarray, basis: NullSpaceBasis,
                       order: int | None = None) -> np.ndarray:
    """Orthonormal basis of the null space of the sub-operator ``D[rows]``.

    For 1d unwrapped operators of known ``order`` the basis is built from
    exact discrete truncated polynomials: the ``order``-fold cumulative sum of
    a unit impulse is mapped by ``D`` onto a single row indicator, so those
    vectors for the dropped rows, together with ``basis``, span the null space.
    Other operators fall back to a dense SVD.
    """
    m, n = D.shape
    rows = np.asarray(rows, dtype=int)
    dropped = np.setdiff1d(np.arange(m), rows)
    if D.full_row_rank and order is not None and m == n - order:
        if dropped.size == 0:
            return basis.Q.copy()
        X = np.zeros((n, dropped.size))
        X[dropped + order, np.arange(dropped.size)] = 1.0
        for _ in range(order):
            X = np.cumsum(X, axis=0)
        X -= basis.Q @ (basis.Q.T @ X)
        Qx, R = np.linalg.qr(X)
        return np.hstack([basis.Q, Qx])
    if m * n > DENSE_LIMIT:
        raise SizeLimitError(f"dense null space of a {m} x {n} operator exceeds the desk-scale limit")
    if rows.size == 0:
        return np.eye(n)
    return sla.null_space(D.matrix[rows].toarray(), rcond=1e-10)
