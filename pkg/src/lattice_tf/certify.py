"""Active-face refinement and optimality certificates.

At a solution of the penalized problem the rows of ``D theta`` split into a
fused set ``A`` (``D_A theta = 0``) and a signed set with fixed signs
``sigma``. Restricted to that face the objective is smooth, so it can be
minimized by Newton in a basis of ``null(D_A)``. Optimality of the result is
certified by exhibiting a subgradient ``s_A in [-1, 1]^A`` that makes the
stationarity residual small.

Face bases come in two forms. When every row of ``D`` is a signed edge
difference (first differences, any lattice), ``null(D_A)`` is spanned by the
indicators of the connected components of the fused edges, a sparse basis.
Otherwise a dense orthonormal basis is built (exactly for 1d chains).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import factorized, lsqr

from .exceptions import SizeLimitError
from .expfam import Family
from .lattice import DENSE_LIMIT, NullSpaceBasis, SparseOperator, null_space_of_rows


def is_edge_operator(D: SparseOperator) -> bool:
    """True when each row is ``e_j - e_i`` for an edge ``(i, j)``."""
    cached = getattr(D, "_edge_flag", None)
    if cached is not None:
        return cached
    M = D.matrix
    counts = np.diff(M.indptr)
    flag = bool(np.all(counts == 2) and np.allclose(np.sort(M.data.reshape(-1, 2), axis=1), [-1.0, 1.0]))
    object.__setattr__(D, "_edge_flag", flag)
    return flag


def _edge_ends(D: SparseOperator, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    M = D.matrix
    start = M.indptr[rows]
    return M.indices[start], M.indices[start + 1]


def diff_order(D: SparseOperator) -> int | None:
    if D.full_row_rank and D.n_cols > D.n_rows:
        return D.n_cols - D.n_rows
    return None


@dataclass
class FaceBasis:
    """Basis ``B`` of ``null(D_A)``; sparse indicators or dense orthonormal columns."""

    B: np.ndarray | sp.csr_matrix
    sparse: bool
    labels: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.B.shape[1]

    def coefficients(self, theta: np.ndarray) -> np.ndarray:
        if self.sparse:
            sizes = np.asarray(self.B.sum(axis=0)).ravel()
            return (self.B.T @ theta) / sizes
        return self.B.T @ theta

    def expand(self, a: np.ndarray) -> np.ndarray:
        return self.B @ a


def face_basis(D: SparseOperator, fused: np.ndarray, basis: NullSpaceBasis | None) -> FaceBasis:
    """Basis of the null space of the fused rows of ``D``."""
    n = D.n_cols
    rows = np.flatnonzero(fused)
    if is_edge_operator(D):
        labels = _component_labels(D, rows)
        B = sp.csr_matrix((np.ones(n), (np.arange(n), labels)), shape=(n, int(labels.max()) + 1))
        return FaceBasis(B, True, labels)
    if basis is not None and diff_order(D) is not None:
        return FaceBasis(null_space_of_rows(D, rows, basis, order=diff_order(D)), False)
    if D.n_rows * n > DENSE_LIMIT:
        raise SizeLimitError("dense face basis exceeds the desk-scale limit")
    if rows.size == 0:
        return FaceBasis(np.eye(n), False)
    return FaceBasis(sla.null_space(D.matrix[rows].toarray(), rcond=1e-10), False)


class _FaceHessian:
    """Solves with ``diag/dense H + U M U^T`` where ``M`` may be singular."""

    def __init__(self, H, U=None, M=None):
        self.diag = H.ndim == 1
        self.H = H
        if not self.diag:
            self.chol = sla.cho_factor(H)
        self.U = U
        self.M = M
        if U is not None:
            HiU = self._base(U)
            k = U.shape[1]
            self.core = np.eye(k) + (U.T @ HiU) @ M
            self.HiU = HiU

    def _base(self, r):
        if self.diag:
            return r / (self.H[:, None] if r.ndim == 2 else self.H)
        return sla.cho_solve(self.chol, r)

    def solve(self, r):
        x = self._base(r)
        if self.U is None:
            return x
        corr = self.HiU @ (self.M @ np.linalg.solve(self.core, self.U.T @ x))
        return x - corr


def face_newton(fam: Family, y: np.ndarray, fb: FaceBasis, c_lin: np.ndarray,
                theta0: np.ndarray, Q: np.ndarray | None, lam2n: float, kink: bool,
                max_iter: int = 60) -> np.ndarray | None:
    """Minimize ``sum psi(theta) - c_lin^T theta + lam2n ||Q^T theta||`` over ``theta = B a``.

    With ``kink`` the null-space coefficients are constrained to zero
    instead of penalized. Returns ``None`` if the domain cannot be kept.
    """
    B = fb.B
    a = fb.coefficients(theta0)
    if not fb.sparse and fb.dim == 0:
        return np.zeros_like(theta0)
    QB = None
    if Q is not None and Q.shape[1] and (lam2n > 0 or kink):
        QB = np.asarray((B.T @ Q)).T  # kappa x r
    lo, hi = fam.theta_domain

    def phi(a):
        th = B @ a
        if np.any(th <= lo) or np.any(th >= hi) or not np.all(np.isfinite(th)):
            return np.inf, th
        with np.errstate(over="ignore"):  # trial points may overflow psi; inf rejects them
            val = float(np.sum(fam.psi(th)) - c_lin @ th)
        if QB is not None and not kink:
            val += lam2n * float(np.linalg.norm(QB @ a))
        return val, th

    f, th = phi(a)
    if not np.isfinite(f):
        return None
    scale = 1.0 + float(np.linalg.norm(B.T @ c_lin))
    for _ in range(max_iter):
        w = fam.psi_double_prime(th)
        ga = np.asarray(B.T @ (fam.psi_prime(th) - c_lin)).ravel()
        if fb.sparse:
            H = np.asarray(B.T @ w).ravel()
        else:
            H = B.T @ (w[:, None] * B)
        U = M = None
        if QB is not None and not kink:
            cq = QB @ a
            ncq = float(np.linalg.norm(cq))
            if ncq == 0:
                return None
            e = cq / ncq
            ga = ga + lam2n * (QB.T @ e)
            U = QB.T
            M = (lam2n / ncq) * (np.eye(e.size) - np.outer(e, e))
        try:
            hs = _FaceHessian(H, U, M)
        except (np.linalg.LinAlgError, sla.LinAlgError):
            return None
        if kink and QB is not None:
            C = QB
            HiCt = hs.solve(C.T)
            Hig = hs.solve(ga)
            S = C @ HiCt
            nu = np.linalg.lstsq(S, C @ a - C @ Hig, rcond=None)[0]
            step = -(Hig + HiCt @ nu)
            res = ga + C.T @ nu
        else:
            step = -hs.solve(ga)
            res = ga
        if np.linalg.norm(res) <= 1e-13 * scale:
            break
        t = 1.0
        slope = float(ga @ step)
        while t > 1e-10:
            f_new, th_new = phi(a + t * step)
            if f_new <= f + 1e-4 * t * slope + 4 * np.finfo(float).eps * (1.0 + abs(f)):
                break
            t *= 0.5
        else:
            break
        a = a + t * step
        f, th = f_new, th_new
    return th


def _component_labels(D: SparseOperator, rows: np.ndarray) -> np.ndarray:
    n = D.n_cols
    i, j = _edge_ends(D, rows)
    graph = sp.csr_matrix((np.ones(rows.size), (i, j)), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def min_norm_correction(D: SparseOperator, rows: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Minimum-norm ``delta`` with ``D_A^T delta`` closest to ``rhs``."""
    if rows.size == 0:
        return np.zeros(0)
    DA = D.matrix[rows]
    n = D.n_cols
    if is_edge_operator(D):
        # Laplacian of the fused graph with one pinned vertex per component
        L = (DA.T @ DA).tocsr()
        labels = _component_labels(D, rows)
        _, first = np.unique(labels, return_index=True)
        keep = np.ones(n, dtype=bool)
        keep[first] = False
        idx = np.flatnonzero(keep)
        phi = np.zeros(n)
        if idx.size:
            Lk = L[idx][:, idx].tocsc()
            phi[idx] = factorized(Lk)(rhs[idx])
        return DA @ phi
    if D.full_row_rank:
        G = (DA @ DA.T).tocsc()
        return factorized(G)(DA @ rhs)
    return lsqr(DA.T, rhs, atol=1e-15, btol=1e-15, iter_lim=50 * n)[0]


def certified_subgradient(D: SparseOperator, fused: np.ndarray, G_perp: np.ndarray, lam1n: float,
                          s0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Subgradient ``s_A`` in the unit box and the residual ``||G_perp + lam1n D_A^T s_A||``.

    Starts from ``s0`` (for example the scaled ADMM dual) and adds the
    minimum-norm correction that cancels the remaining residual, then clips.
    """
    rows = np.flatnonzero(fused)
    if rows.size == 0 or lam1n == 0:
        return np.zeros(rows.size), float(np.linalg.norm(G_perp))
    DA = D.matrix[rows]
    DAt = DA.T.tocsr()
    s = np.zeros(rows.size) if s0 is None else np.clip(s0, -1.0, 1.0)
    best_s = s
    best = float(np.linalg.norm(G_perp + lam1n * (DAt @ s)))
    for _ in range(3):
        res = G_perp + lam1n * (DAt @ s)
        delta = min_norm_correction(D, rows, -res / lam1n)
        s = np.clip(s + delta, -1.0, 1.0)
        val = float(np.linalg.norm(G_perp + lam1n * (DAt @ s)))
        if val < best:
            best, best_s = val, s
        else:
            break
    return best_s, best
