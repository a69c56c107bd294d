"""Linearized ADMM for exponential-family trend filtering on lattices.

The solver minimizes the n-scaled objective

    sum_i psi(theta_i) - y_i theta_i + n lambda1 ||D theta||_1 + n lambda2 ||P_N theta||_2

which is ``n`` times the per-observation objective in which ``lambda1`` and
``lambda2`` are reported. The TV term is split as ``z = D theta``. When
``lambda2 > 0`` the null-space term is split as ``v = Q^T theta`` so that its
non-smooth kink is handled by a group soft-threshold; the coupling quadratic
of both splits is majorized by ``mu/2 ||theta - theta_prev||^2`` so that the
theta-update separates into scalar equations ``psi'(x) + mu x = b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr, splu

from .certify import FaceBasis, certified_subgradient, face_basis, face_newton
from .exceptions import DimensionError, DomainError, SizeLimitError
from .expfam import Family, get_family, initial_theta, link_inverse, scalar_prox_solve, theta_box
from .lattice import NullSpaceBasis, SparseOperator
from .ipm import pdip_tv
from .tv import line_subgradient, tv_lines

_RHO_FLOOR = 1e-300
# iterations between checks of the fused pattern, and the refinement schedule
_PATTERN_EVERY = 25
_REFINE_START = 50
_REFINE_MAX_GAP = 1600
# largest dense system handed to the exact bounded least-squares certificate
_BVLS_LIMIT = 250_000


@dataclass(frozen=True)
class FitConfig:
    """Penalty levels and ADMM controls.

    ``lambda1`` and ``lambda2`` are in per-observation units. ``rho`` is the
    splitting parameter of the n-scaled problem; ``None`` selects
    ``n * lambda1`` (or ``n * lambda2`` when ``lambda1 = 0``). ``mu``
    overrides the majorization constant, which otherwise is
    ``mu_safety * rho * max(lambda_max(D^T D), 1)``.

    ``null_update="subgradient"`` replaces the null-space split by the
    linearized subgradient step. ``polish`` enables active-face Newton
    refinement: whenever the fused pattern of the split variable is stable,
    the objective restricted to that face is minimized and the result is
    accepted only if a subgradient certificate meets the dual tolerance.
    ``divergence_bound`` stops the iteration once ``||theta||_inf`` exceeds it.

    ``method="axis"`` splits the TV term per lattice axis and applies the
    exact 1d TV prox along every line (first differences on unwrapped axes
    only). ``"auto"`` uses it whenever the operator allows, else the
    interior-point method when ``lambda2 = 0`` without a box, else the
    linearized ADMM. ``"ipm"`` runs a
    primal-dual interior-point method (``lambda2 = 0``, no box), counting
    Newton steps as iterations.
    """

    lambda1: float = 0.0
    lambda2: float = 0.0
    rho: Optional[float] = None
    max_iter: int = 5000
    tol_abs: float = 1e-8
    tol_rel: float = 1e-6
    box_K: Optional[float] = None
    mu_safety: float = 1.01
    mu: Optional[float] = None
    adapt_rho: bool = False
    null_update: str = "split"
    polish: bool = True
    divergence_bound: Optional[float] = None
    active_tol: float = 1e-6
    method: str = "linearized"
    dual_residual: str = "standard"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty levels must be non-negative")
        if self.rho is not None and self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.tol_abs <= 0 or self.tol_rel <= 0:
            raise ValueError("tolerances must be positive")
        if self.mu_safety <= 1:
            raise ValueError("mu_safety must exceed 1")
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if self.box_K is not None and self.box_K <= 0:
            raise ValueError("box_K must be positive")
        if self.null_update not in ("split", "subgradient"):
            raise ValueError("null_update must be 'split' or 'subgradient'")
        if self.dual_residual not in ("standard", "augmented"):
            raise ValueError("dual_residual must be 'standard' or 'augmented'")
        if self.method not in ("linearized", "axis", "auto", "ipm"):
            raise ValueError("method must be 'linearized', 'axis', 'auto' or 'ipm'")


@dataclass
class FitResult:
    theta_hat: np.ndarray
    beta_hat: np.ndarray
    z: np.ndarray
    u: np.ndarray
    iterations: int
    primal_residuals: list[float]
    dual_residuals: list[float]
    objective_trace: list[float]
    converged: bool
    lambda1: float
    lambda2: float
    rho: float
    family: str
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    s: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diverged: bool = False
    polished: bool = False
    aux: dict | None = None


def soft_threshold(v, a: float) -> np.ndarray:
    """``sign(v) * max(|v| - a, 0)``."""
    if a < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=float)
    return v - np.clip(v, -a, a)


def group_soft_threshold(v: np.ndarray, a: float) -> np.ndarray:
    """Proximal map of ``a * ||.||_2``."""
    nv = float(np.linalg.norm(v))
    if nv <= a:
        return np.zeros_like(v)
    return (1.0 - a / nv) * v


def objective(theta, y, family, D: SparseOperator, basis: NullSpaceBasis | None,
              lambda1: float, lambda2: float = 0.0) -> float:
    """Per-observation penalized objective at ``theta``."""
    fam = get_family(family)
    theta = np.asarray(theta, dtype=float)
    val = float(np.mean(fam.psi(theta) - np.asarray(y, dtype=float) * theta))
    val += lambda1 * float(np.sum(np.abs(D.matvec(theta))))
    if lambda2 > 0:
        val += lambda2 * float(np.linalg.norm(basis.Q.T @ theta))
    return val


def _check_inputs(y, D: SparseOperator, basis: NullSpaceBasis | None):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise DimensionError("y must be a flat vector")
    if D.n_cols != y.size:
        raise DimensionError(f"operator has {D.n_cols} columns but y has {y.size} entries")
    if basis is not None and basis.Q.shape[0] != y.size:
        raise DimensionError("null-space basis does not match the data length")
    return y


def _box(fam: Family, K):
    if K is None:
        return None
    return theta_box(fam, K)


def _clamp(x, box):
    if box is None:
        return x
    lo, hi = box
    if np.isfinite(lo):
        x = np.maximum(x, lo)
    if np.isfinite(hi):
        # open upper boundary (exponential) is never reached by the prox step
        x = np.minimum(x, hi) if hi != 0.0 else x
    return x


def fit_mle_tf(y, family, D: SparseOperator, basis: NullSpaceBasis | None = None,
               config: FitConfig = FitConfig(), warm: FitResult | None = None,
               callback: Callable[[int, np.ndarray], None] | None = None) -> FitResult:
    """Penalized MLE trend filter by linearized ADMM.

    Parameters
    ----------
    y : ndarray
        Natural statistics, flat in lattice order.
    family : str or Family
    D : SparseOperator
        Lattice difference operator.
    basis : NullSpaceBasis, optional
        Required when ``config.lambda2 > 0``.
    config : FitConfig
    warm : FitResult, optional
        Previous solution whose primal, split and dual state seed the iteration.
    callback : callable, optional
        Called as ``callback(iteration, theta)`` after every iteration.

    Returns
    -------
    FitResult
        Non-convergence is reported through ``converged``, not raised.
    """
    fam = get_family(family)
    y = _check_inputs(y, D, basis)
    n = y.size
    cfg = config
    if cfg.lambda2 > 0 and basis is None:
        raise ValueError("lambda2 > 0 needs a null-space basis")
    box = _box(fam, cfg.box_K)

    if cfg.lambda1 == 0 and cfg.lambda2 == 0:
        theta = _clamp(link_inverse(fam, y), box)
        z = D.matvec(theta)
        return FitResult(theta, fam.psi_prime(theta), z, np.zeros_like(z), 0, [0.0], [0.0],
                         [objective(theta, y, fam, D, basis, 0.0)], True, 0.0, 0.0,
                         float(cfg.rho or 1.0), fam.name)

    lam1 = n * cfg.lambda1
    lam2 = n * cfg.lambda2
    if lam1 > 0 and lam2 == 0 and box is None and basis is not None:
        early = _null_fit_if_certified(y, fam, D, basis, cfg)
        if early is not None:
            return early
    if cfg.method == "ipm" and lam1 > 0:
        return _fit_ipm(y, fam, D, cfg, basis)
    if cfg.method != "linearized" and lam1 > 0:
        if axis_split_supported(D):
            return _fit_axis(y, fam, D, basis, cfg, box, warm, callback)
        if cfg.method == "axis":
            raise ValueError("method='axis' needs first differences on unwrapped lattice axes")
        if cfg.method == "auto" and lam2 == 0 and box is None:
            return _fit_ipm(y, fam, D, cfg, basis)
    rho = float(cfg.rho) if cfg.rho is not None else (lam1 if lam1 > 0 else lam2)
    split = lam2 > 0 and cfg.null_update == "split"
    Q = basis.Q if (basis is not None and lam2 > 0) else np.zeros((n, 0))
    lam_max = D.lambda_max

    def mu_of(r):
        if cfg.mu is not None:
            return float(cfg.mu)
        return cfg.mu_safety * r * max(lam_max, 1.0 if split else 0.0)

    if warm is not None:
        x = np.array(warm.theta_hat, dtype=float)
        z = np.array(warm.z, dtype=float)
        scale = warm.rho / rho
        u = np.array(warm.u, dtype=float) * scale
        if split and warm.v.size == Q.shape[1]:
            v = np.array(warm.v, dtype=float)
            s = np.array(warm.s, dtype=float) * scale
        else:
            v = Q.T @ x
            s = np.zeros(Q.shape[1])
    else:
        x = _clamp(initial_theta(fam, y), box)
        z = D.matvec(x)
        u = np.zeros_like(z)
        v = Q.T @ x
        s = np.zeros(Q.shape[1])
    if not split:
        v = np.zeros(0)
        s = np.zeros(0)
    Qs = Q if split else np.zeros((n, 0))

    m = D.n_rows
    kq = Qs.shape[1]
    standard = cfg.dual_residual == "standard"
    Dx = D.matvec(x)
    w = D.rmatvec(u)
    wr = D.rmatvec(Dx - z)
    qx = Qs.T @ x
    rq = qx - v
    mu = mu_of(rho)

    primal, dual, obj = [], [], []
    converged = False
    diverged = False
    polished = False
    refine_ok = cfg.polish and box is None and lam1 > 0
    pattern = z == 0
    next_try, gap = _REFINE_START, _REFINE_START

    def try_refine():
        nonlocal x, z, u, v, s, Dx, w, wr, qx, rq, refine_ok
        try:
            ref = _refine(x, z, u, rho, y, fam, D, basis, cfg, lam1, lam2, split, v if split else None)
        except SizeLimitError:
            refine_ok = False
            return False
        if ref is None or not ref.certified:
            return False
        if cfg.divergence_bound is not None and np.max(np.abs(ref.theta)) > cfg.divergence_bound:
            return False
        x, z, u = ref.theta, ref.z, ref.u
        if split:
            v, s = ref.v, ref.s
        return True

    it = 0
    for it in range(1, cfg.max_iter + 1):
        grad = rho * (wr + w)
        if kq:
            grad = grad + rho * (Qs @ (rq + s))
        elif lam2 > 0:
            pn = Q @ (Q.T @ x)
            npn = np.linalg.norm(pn)
            if npn > 0:
                grad = grad + lam2 * pn / npn
        b = y - grad + mu * x
        x_new = _clamp(scalar_prox_solve(fam, mu, b, x0=x), box)
        if not np.all(np.isfinite(x_new)):
            diverged = True
            break
        Dx_new = D.matvec(x_new)
        z_new = soft_threshold(Dx_new + u, lam1 / rho)
        r = Dx_new - z_new
        u_new = u + r
        w_new = D.rmatvec(u_new)
        wr_new = w_new - w
        if standard:
            dual_vec = rho * D.rmatvec(z_new - z)
        else:
            dual_vec = rho * (wr_new - wr) - mu * (x_new - x)
        if kq:
            qx_new = Qs.T @ x_new
            v_new = group_soft_threshold(qx_new + s, lam2 / rho)
            rq_new = qx_new - v_new
            s_new = s + rq_new
            if standard:
                dual_vec = dual_vec + rho * (Qs @ (v_new - v))
            else:
                dual_vec = dual_vec + rho * (Qs @ (rq_new - rq))
        else:
            qx_new, v_new, rq_new, s_new = qx, v, rq, s

        x, Dx, z, u, w, wr = x_new, Dx_new, z_new, u_new, w_new, wr_new
        qx, v, rq, s = qx_new, v_new, rq_new, s_new

        r_norm = float(np.sqrt(r @ r + rq @ rq))
        d_norm = float(np.sqrt(dual_vec @ dual_vec))
        primal.append(r_norm)
        dual.append(d_norm)
        val = float(np.sum(fam.psi(x)) - y @ x) + lam1 * float(np.abs(Dx).sum())
        if lam2 > 0:
            val += lam2 * float(np.linalg.norm(Q.T @ x))
        obj.append(val / n)
        if callback is not None:
            callback(it, x)

        eps_pri = np.sqrt(m + kq) * cfg.tol_abs + cfg.tol_rel * np.sqrt(max(
            Dx @ Dx + qx @ qx, z @ z + v @ v))
        if r_norm <= eps_pri:
            dual_ref = w + Qs @ s if kq else w
            eps_dual = np.sqrt(n) * cfg.tol_abs + cfg.tol_rel * rho * np.sqrt(dual_ref @ dual_ref)
            if d_norm <= eps_dual:
                converged = True
                break
        if cfg.divergence_bound is not None and np.max(np.abs(x)) > cfg.divergence_bound:
            diverged = True
            break
        if refine_ok and it % _PATTERN_EVERY == 0:
            new_pattern = z == 0
            stable = np.array_equal(new_pattern, pattern)
            pattern = new_pattern
            if stable and it >= next_try:
                if try_refine():
                    converged = polished = True
                    break
                gap = min(2 * gap, _REFINE_MAX_GAP)
                next_try = it + gap
        if cfg.adapt_rho:
            new_rho = rho
            if r_norm > 10.0 * d_norm:
                new_rho = 2.0 * rho
            elif d_norm > 10.0 * r_norm:
                new_rho = max(0.5 * rho, _RHO_FLOOR)
            if new_rho != rho:
                ratio = rho / new_rho
                u = u * ratio
                w = w * ratio
                wr = D.rmatvec(Dx - z)
                s = s * ratio
                rho = new_rho
                mu = mu_of(rho)

    if refine_ok and not diverged and (converged or it == cfg.max_iter):
        # a certified face solution is at least as accurate as the ADMM iterate
        if try_refine():
            converged = polished = True
    result = FitResult(x, fam.psi_prime(x), z, u, it, primal, dual, obj, converged,
                       cfg.lambda1, cfg.lambda2, rho, fam.name, v=v, s=s, diverged=diverged,
                       polished=polished)
    return result


def axis_split_supported(D: SparseOperator) -> bool:
    """True when ``D`` is the first-difference operator of an unwrapped lattice."""
    spec = D.spec
    return spec is not None and all(k == 0 for k in spec.orders) and not any(spec.wrap)


def _axis_to_rows(Z: np.ndarray, dims) -> np.ndarray:
    # stacked first differences of the per-axis copies, in operator row order
    return np.concatenate([np.diff(Z[j].reshape(dims), axis=j).ravel() for j in range(len(dims))])


def _rows_to_axis(u: np.ndarray, dims) -> np.ndarray:
    # D_j^T u_j for each axis block
    n = int(np.prod(dims))
    out = np.empty((len(dims), n))
    off = 0
    for j, N in enumerate(dims):
        shape = list(dims)
        shape[j] = N - 1
        size = int(np.prod(shape))
        blk = u[off:off + size].reshape(shape)
        pad = [(0, 0)] * len(dims)
        pad[j] = (1, 1)
        # (D^T s)_i = s_{i-1} - s_i
        padded = np.pad(blk, pad)
        out[j] = -np.diff(padded, axis=j).ravel()
        off += size
    return out


def _subgradient_rows(U: np.ndarray, dims) -> np.ndarray:
    return np.concatenate([line_subgradient(U[j], dims, j) for j in range(len(dims))])


def _fit_axis(y, fam: Family, D: SparseOperator, basis, cfg: FitConfig, box, warm, callback) -> FitResult:
    """Consensus ADMM with one TV copy per axis, each updated by exact 1d TV proxes.

    The theta-update solves ``psi'(x) + d rho x = b`` exactly. A null-space
    split, when present, is coupled through a linearized term, which adds
    the proximal weight ``rho (I - Q Q^T)`` and keeps the update separable.
    """
    dims = D.spec.dims
    dd = len(dims)
    n = y.size
    lam1 = n * cfg.lambda1
    lam2 = n * cfg.lambda2
    rho = float(cfg.rho) if cfg.rho is not None else lam1
    split = lam2 > 0 and cfg.null_update == "split"
    Q = basis.Q if (basis is not None and lam2 > 0) else np.zeros((n, 0))
    Qs = Q if split else np.zeros((n, 0))
    kq = Qs.shape[1]
    standard = cfg.dual_residual == "standard"

    def mu_of(r):
        return dd * r + (r if kq else 0.0)

    if warm is not None:
        x = np.array(warm.theta_hat, dtype=float)
        scale = warm.rho / rho
        if warm.aux is not None and warm.aux.get("Z", np.zeros(0)).shape == (dd, n):
            Z = np.array(warm.aux["Z"], dtype=float)
            U = np.array(warm.aux["U"], dtype=float) * scale
        else:
            Z = np.tile(x, (dd, 1))
            U = _rows_to_axis(np.asarray(warm.u, dtype=float), dims) * scale
        if split and warm.v.size == kq:
            v = np.array(warm.v, dtype=float)
            s = np.array(warm.s, dtype=float) * scale
        else:
            v = Qs.T @ x
            s = np.zeros(kq)
    else:
        x = _clamp(initial_theta(fam, y), box)
        Z = np.tile(x, (dd, 1))
        U = np.zeros((dd, n))
        v = Qs.T @ x
        s = np.zeros(kq)
    qx = Qs.T @ x
    rq = qx - v
    mu = mu_of(rho)

    primal, dual, obj = [], [], []
    converged = diverged = polished = False
    refine_ok = cfg.polish and box is None
    pattern = None
    next_try, gap = _REFINE_START, _REFINE_START

    def try_refine():
        nonlocal x, Z, U, v, s, qx, rq, refine_ok
        zr = _axis_to_rows(Z, dims)
        ur = _subgradient_rows(U, dims)
        try:
            ref = _refine(x, zr, ur, rho, y, fam, D, basis, cfg, lam1, lam2, split, v if split else None)
        except SizeLimitError:
            refine_ok = False
            return False
        if ref is None or not ref.certified:
            return False
        if cfg.divergence_bound is not None and np.max(np.abs(ref.theta)) > cfg.divergence_bound:
            return False
        x = ref.theta
        Z = np.tile(x, (dd, 1))
        U = _rows_to_axis(ref.u, dims)
        if split:
            v, s = ref.v, ref.s
            qx = Qs.T @ x
            rq = qx - v
        return True

    it = 0
    for it in range(1, cfg.max_iter + 1):
        b = y + rho * (Z - U).sum(axis=0)
        if kq:
            b = b + rho * x - rho * (Qs @ (rq + s))
        elif lam2 > 0:
            pn = Q @ (Q.T @ x)
            npn = np.linalg.norm(pn)
            if npn > 0:
                b = b - lam2 * pn / npn
        x_new = _clamp(scalar_prox_solve(fam, mu, b, x0=x), box)
        if not np.all(np.isfinite(x_new)):
            diverged = True
            break
        Z_new = np.empty_like(Z)
        for j in range(dd):
            Z_new[j] = tv_lines(x_new + U[j], dims, j, lam1 / rho)
        R = x_new - Z_new
        U = U + R
        dz = (Z_new - Z).sum(axis=0)
        dual_vec = -rho * dz
        if kq:
            dx = x_new - x
            qx_new = Qs.T @ x_new
            v_new = group_soft_threshold(qx_new + s, lam2 / rho)
            rq_new = qx_new - v_new
            s = s + rq_new
            dual_vec = dual_vec - rho * (Qs @ (v_new - v))
            if not standard:
                dual_vec = dual_vec - rho * (dx - Qs @ (Qs.T @ dx))
            qx, v, rq = qx_new, v_new, rq_new
        x, Z = x_new, Z_new

        r_norm = float(np.sqrt(np.sum(R * R) + rq @ rq))
        d_norm = float(np.sqrt(dual_vec @ dual_vec))
        primal.append(r_norm)
        dual.append(d_norm)
        Dx = D.matvec(x)
        val = float(np.sum(fam.psi(x)) - y @ x) + lam1 * float(np.abs(Dx).sum())
        if lam2 > 0:
            val += lam2 * float(np.linalg.norm(Q.T @ x))
        obj.append(val / n)
        if callback is not None:
            callback(it, x)

        eps_pri = np.sqrt(dd * n + kq) * cfg.tol_abs + cfg.tol_rel * np.sqrt(max(
            dd * (x @ x) + qx @ qx, float(np.sum(Z * Z)) + v @ v))
        if r_norm <= eps_pri:
            dual_ref = U.sum(axis=0) + (Qs @ s if kq else 0.0)
            eps_dual = np.sqrt(n) * cfg.tol_abs + cfg.tol_rel * rho * np.sqrt(dual_ref @ dual_ref)
            if d_norm <= eps_dual:
                converged = True
                break
        if cfg.divergence_bound is not None and np.max(np.abs(x)) > cfg.divergence_bound:
            diverged = True
            break
        if refine_ok and it % _PATTERN_EVERY == 0:
            new_pattern = _axis_to_rows(Z, dims) == 0
            stable = pattern is not None and np.array_equal(new_pattern, pattern)
            pattern = new_pattern
            if stable and it >= next_try:
                if try_refine():
                    converged = polished = True
                    break
                gap = min(2 * gap, _REFINE_MAX_GAP)
                next_try = it + gap
        if cfg.adapt_rho:
            new_rho = rho
            if r_norm > 10.0 * d_norm:
                new_rho = 2.0 * rho
            elif d_norm > 10.0 * r_norm:
                new_rho = max(0.5 * rho, _RHO_FLOOR)
            if new_rho != rho:
                ratio = rho / new_rho
                U = U * ratio
                s = s * ratio
                rho = new_rho
                mu = mu_of(rho)

    if refine_ok and not diverged and not polished and (converged or it == cfg.max_iter):
        if try_refine():
            converged = polished = True
    z = _axis_to_rows(Z, dims)
    u = _subgradient_rows(U, dims)
    return FitResult(x, fam.psi_prime(x), z, u, it, primal, dual, obj, converged,
                     cfg.lambda1, cfg.lambda2, rho, fam.name, v=v if split else np.zeros(0),
                     s=s if split else np.zeros(0), diverged=diverged, polished=polished,
                     aux={"Z": Z, "U": U})


def _fit_ipm(y, fam: Family, D: SparseOperator, cfg: FitConfig, basis=None) -> FitResult:
    """Interior-point fit.

    With a null basis, penalties at or above the certified ``lambda1_max``
    return the null-space fit directly, where the interior iterates would
    only approach the boundary of the dual box.

    Stops once the surrogate duality gap is at most ``tol_rel (1 + |F|)``
    (``F`` the n-scaled objective) and the subgradient built from the
    multipliers meets the dual tolerance of active-face refinement. There is
    no split, so ``z = D theta`` and the primal trace records the gap.
    """
    if cfg.lambda2 > 0 or cfg.box_K is not None:
        raise ValueError("method='ipm' supports lambda2 = 0 without a box constraint")
    n = y.size
    lam1 = n * cfg.lambda1
    rho = float(cfg.rho) if cfg.rho is not None else lam1
    obj: list[float] = []
    state = {}
    if basis is not None:
        early = _null_fit_if_certified(y, fam, D, basis, cfg)
        if early is not None:
            return early

    def accept(theta, s_ipm, gap):
        Dt = D.matvec(theta)
        fused = active_mask(Dt, cfg.active_tol)
        s_full = np.where(fused, s_ipm, np.sign(Dt))
        pen = lam1 * D.rmatvec(s_full)
        G = fam.psi_prime(theta) - y + pen
        F = float(np.sum(fam.psi(theta)) - y @ theta + lam1 * np.abs(Dt).sum())
        obj.append(F / n)
        eps_dual = np.sqrt(n) * cfg.tol_abs + cfg.tol_rel * float(np.linalg.norm(pen))
        state.update(Dt=Dt, s_full=s_full)
        return gap <= cfg.tol_rel * (1.0 + abs(F)) and float(np.linalg.norm(G)) <= eps_dual

    theta0 = initial_theta(fam, y)
    theta, _, it, ok, trace = pdip_tv(fam, y, D, lam1, theta0, cfg.max_iter, accept)
    u = lam1 * state["s_full"] / rho
    return FitResult(theta, fam.psi_prime(theta), state["Dt"], u, it, trace.gaps, trace.residuals, obj,
                     ok, cfg.lambda1, cfg.lambda2, rho, fam.name)


def fit_mean_tf(y, D: SparseOperator, config: FitConfig = FitConfig(),
                basis: NullSpaceBasis | None = None, warm: FitResult | None = None) -> FitResult:
    """Mean trend filter, i.e. the gaussian-family fit with ``lambda2 = 0``."""
    return fit_mle_tf(y, "gaussian", D, basis, replace(config, lambda2=0.0), warm=warm)


def fit_path(y, family, D: SparseOperator, basis: NullSpaceBasis | None,
             lambda1_sequence: Sequence[float], config: FitConfig = FitConfig()) -> list[FitResult]:
    """Fits along an increasing ``lambda1`` sequence, each warm-started from the previous."""
    lams = np.asarray(lambda1_sequence, dtype=float)
    if lams.ndim != 1 or lams.size < 1:
        raise ValueError("need at least one lambda1 value")
    if np.any(np.diff(lams) <= 0):
        raise ValueError("lambda1 sequence must be strictly increasing")
    out: list[FitResult] = []
    warm = None
    for lam in lams:
        fit = fit_mle_tf(y, family, D, basis, replace(config, lambda1=float(lam)), warm=warm)
        out.append(fit)
        if fit.iterations > 0 and not fit.diverged:
            warm = fit
    return out


# optimality ---------------------------------------------------------------

def active_mask(Dtheta: np.ndarray, active_tol: float) -> np.ndarray:
    """Rows treated as fused: ``|D theta| <= active_tol * (1 + ||D theta||_inf)``."""
    scale = 1.0 + (float(np.max(np.abs(Dtheta))) if Dtheta.size else 0.0)
    return np.abs(Dtheta) <= active_tol * scale


def fused_rows(fit, Dtheta: np.ndarray, active_tol: float) -> np.ndarray:
    """Tolerance-fused rows, plus rows the ADMM split variable set exactly to zero."""
    act = active_mask(Dtheta, active_tol)
    if isinstance(fit, FitResult) and fit.z.shape == Dtheta.shape:
        act |= fit.z == 0
    return act


@dataclass
class _Stationarity:
    residual: float          # n-scaled norm of the best subgradient found
    s_full: np.ndarray       # TV subgradient on every row
    null_sub: np.ndarray     # null-space subgradient coefficients (unit ball)
    scale: float             # n-scaled norm of the penalty subgradient, for relative tests


def _stationarity(theta, y, fam: Family, D: SparseOperator, basis, lam1n, lam2n, fused, sgn,
                  s0=None, null_tol=1e-9, exact_small=False) -> _Stationarity:
    G = fam.psi_prime(theta) - y + (lam1n * D.rmatvec(sgn) if lam1n > 0 else 0.0)
    null_res = 0.0
    null_sub = np.zeros(0)
    pen = lam1n * D.rmatvec(sgn) if lam1n > 0 else np.zeros_like(theta)
    if lam2n > 0:
        Q = basis.Q
        c = Q.T @ theta
        nc = float(np.linalg.norm(c))
        if nc > null_tol * (1.0 + float(np.max(np.abs(theta)))):
            null_sub = c / nc
            G = G + lam2n * (Q @ null_sub)
            gq = Q.T @ G
            null_res = float(np.linalg.norm(gq))
        else:
            gq = Q.T @ G
            ngq = float(np.linalg.norm(gq))
            null_res = max(0.0, ngq - lam2n)
            null_sub = -gq / max(ngq, lam2n)
        G_perp = G - Q @ gq
        pen = pen + lam2n * (Q @ null_sub)
    else:
        G_perp = G
    s_A, perp = certified_subgradient(D, fused, G_perp, lam1n, s0)
    rows = np.flatnonzero(fused)
    tight = perp <= 1e-12 * (1.0 + float(np.linalg.norm(y)))
    if exact_small and not tight and rows.size and lam1n > 0 and rows.size * theta.size <= _BVLS_LIMIT:
        M = lam1n * D.matrix[rows].T.toarray()
        sol = lsq_linear(M, -G_perp, bounds=(-1.0, 1.0), method="bvls", tol=1e-14)
        alt = float(np.linalg.norm(G_perp + M @ sol.x))
        if alt < perp:
            perp, s_A = alt, sol.x
    s_full = sgn.astype(float).copy()
    s_full[rows] = s_A
    if lam1n > 0 and rows.size:
        pen = pen + lam1n * D.rmatvec(np.where(fused, s_full, 0.0))
    return _Stationarity(float(np.hypot(perp, null_res)), s_full, null_sub, float(np.linalg.norm(pen)))


def kkt_residual(fit: FitResult | np.ndarray, y, family, D: SparseOperator,
                 basis: NullSpaceBasis | None, config: FitConfig) -> float:
    """Norm of the minimum-norm subgradient of the per-observation objective.

    Rows with ``|D theta|`` below the active tolerance (or set exactly to zero
    by the ADMM split) carry a free subgradient in ``[-1, 1]``, chosen to
    minimize the residual. The null-space term contributes ``Q c / ||c||``
    away from the kink and any vector of norm at most ``lambda2`` at it.
    """
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    theta = np.asarray(fit.theta_hat if isinstance(fit, FitResult) else fit, dtype=float)
    n = theta.size
    lam1n, lam2n = n * config.lambda1, n * config.lambda2
    if lam2n > 0 and basis is None:
        raise ValueError("lambda2 > 0 needs a null-space basis")
    Dt = D.matvec(theta)
    fused = fused_rows(fit, Dt, config.active_tol) if lam1n > 0 else np.zeros(Dt.size, dtype=bool)
    sgn = np.where(fused, 0.0, np.sign(Dt))
    s0 = None
    if isinstance(fit, FitResult) and fit.u.shape == Dt.shape and lam1n > 0:
        s0 = fit.u[fused] * fit.rho / lam1n
    st = _stationarity(theta, y, fam, D, basis, lam1n, lam2n, fused, sgn, s0=s0,
                       null_tol=config.active_tol, exact_small=True)
    return st.residual / n


# active-face refinement -----------------------------------------------------

@dataclass
class _Refined:
    theta: np.ndarray
    z: np.ndarray
    u: np.ndarray
    v: np.ndarray
    s: np.ndarray
    certified: bool


def _refine(x, z, u, rho, y, fam: Family, D: SparseOperator, basis, cfg: FitConfig,
            lam1n: float, lam2n: float, split: bool, v: np.ndarray | None = None) -> _Refined | None:
    n = x.size
    Dx = D.matvec(x)
    fused = active_mask(Dx, cfg.active_tol) | (z == 0) if lam1n > 0 else np.zeros(Dx.size, dtype=bool)
    sgn = np.where(fused, 0.0, np.where(z != 0, np.sign(z), np.sign(Dx)))
    fb = face_basis(D, fused, basis)
    c_lin = y - (lam1n * D.rmatvec(sgn) if lam1n > 0 else 0.0)
    Q = basis.Q if (basis is not None and lam2n > 0) else None
    kink = False
    theta0 = x
    if Q is not None:
        if split and v is not None:
            kink = not np.any(v)
        else:
            kink = float(np.linalg.norm(Q.T @ x)) <= cfg.active_tol * (1.0 + float(np.max(np.abs(x))))
        if kink:
            theta0 = x - Q @ (Q.T @ x)
    theta = face_newton(fam, y, fb, c_lin, theta0, Q, lam2n, kink)
    if theta is None or not np.all(np.isfinite(theta)):
        return None
    Dt = D.matvec(theta)
    free = ~fused
    if np.any(np.sign(Dt[free]) != sgn[free]):
        return None
    s0 = u[fused] * rho / lam1n if lam1n > 0 else None
    st = _stationarity(theta, y, fam, D, basis, lam1n, lam2n, fused, sgn, s0=s0,
                       null_tol=np.inf if kink else cfg.active_tol)
    zr = np.where(fused, 0.0, Dt)
    primal = float(np.linalg.norm(Dt[fused]))
    eps_pri = np.sqrt(D.n_rows) * cfg.tol_abs + cfg.tol_rel * float(np.linalg.norm(Dt))
    eps_dual = np.sqrt(n) * cfg.tol_abs + cfg.tol_rel * st.scale
    certified = primal <= eps_pri and st.residual <= eps_dual
    u_new = lam1n * st.s_full / rho
    if split and Q is not None:
        v_new = np.zeros(Q.shape[1]) if kink else Q.T @ theta
        s_new = lam2n * st.null_sub / rho
    else:
        v_new = np.zeros(0)
        s_new = np.zeros(0)
    return _Refined(theta, zr, u_new, v_new, s_new, certified)


# penalty scale --------------------------------------------------------------

def null_space_fit(y, family, basis: NullSpaceBasis) -> np.ndarray:
    """Unpenalized MLE restricted to the null space of ``D``."""
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    if fam.name == "gaussian":
        return basis.project(y)
    t0 = float(link_inverse(fam, np.mean(y)))
    fb = FaceBasis(basis.Q, False)
    th = face_newton(fam, y, fb, y, np.full(y.size, t0), None, 0.0, False, max_iter=200)
    if th is None:
        raise DomainError("null-space fit left the parameter domain")
    return th


def lambda1_max(y, family, D: SparseOperator, basis: NullSpaceBasis) -> float:
    """Smallest ``lambda1`` (per observation) whose solution lies in the null space.

    Computed from the minimum-norm dual certificate, which is exact for
    full-row-rank operators and an upper bound otherwise.
    """
    _, sol = _null_certificate(y, get_family(family), D, basis)
    return float(np.max(np.abs(sol), initial=0.0))


def _null_fit_if_certified(y, fam: Family, D: SparseOperator, basis: NullSpaceBasis, cfg: FitConfig):
    # the null-space fit solves the problem once lambda1 >= lambda1_max (lambda2 = 0)
    n = y.size
    try:
        th, cert = _null_certificate(y, fam, D, basis)
    except DomainError:
        return None
    if float(np.max(np.abs(cert), initial=0.0)) > cfg.lambda1:
        return None
    lam1 = n * cfg.lambda1
    rho = float(cfg.rho) if cfg.rho is not None else lam1
    Dt = D.matvec(th)
    F = float(np.sum(fam.psi(th)) - y @ th + lam1 * np.abs(Dt).sum())
    return FitResult(th, fam.psi_prime(th), Dt, n * cert / rho, 0, [0.0], [0.0], [F / n], True,
                     cfg.lambda1, cfg.lambda2, rho, fam.name)


def _null_certificate(y, fam: Family, D: SparseOperator, basis: NullSpaceBasis):
    # null-space fit and the minimum-norm s with D^T s = -(psi'(theta) - y) / n
    y = np.asarray(y, dtype=float)
    th = null_space_fit(y, fam, basis)
    g = (fam.psi_prime(th) - y) / y.size
    return th, D.matvec(_gram_solve(D, basis.Q, -g))


def _gram_factor(D: SparseOperator, Q: np.ndarray):
    # LU of the bordered system, cached on the operator per null basis
    cache = D.__dict__.setdefault("_gram_lu", {})
    key = (Q.shape, hash(np.ascontiguousarray(Q).tobytes()))
    if key not in cache:
        M = D.matrix
        Qs = sp.csc_matrix(Q)
        K = sp.bmat([[M.T @ M, Qs], [Qs.T, None]], format="csc")
        if len(cache) >= 4:
            cache.pop(next(iter(cache)))
        cache[key] = (K, splu(K, permc_spec="MMD_AT_PLUS_A"))
    return cache[key]


def _gram_solve(D: SparseOperator, Q: np.ndarray, r: np.ndarray) -> np.ndarray:
    # x orthogonal to null(D) with D^T D x = r, from the bordered system
    # [[D^T D, Q], [Q^T, 0]]; D x is then the minimum-norm solution of D^T s = r
    K, lu = _gram_factor(D, Q)
    rhs = np.concatenate([r, np.zeros(Q.shape[1])])
    sol = lu.solve(rhs)
    for _ in range(2):
        sol = sol + lu.solve(rhs - K @ sol)
    return sol[: D.n_cols]
