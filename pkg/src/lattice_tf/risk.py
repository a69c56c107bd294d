"""Degrees of freedom, unbiased risk estimates and tuning-parameter selection.

The divergence of a fit is computed on its active face. With ``U`` an
orthonormal basis of ``null(D_A)`` for the fused rows ``A``, the fitted
natural parameter moves as ``d theta = U M^+ U^T dy`` with

    M = U^T diag(psi'') U + n lambda2 U^T H_N U,

where ``H_N`` is the Hessian of ``||P_N theta||_2``. The divergence of
``beta = psi'(theta)`` is ``tr(M^+ U^T diag(psi'') U)``, that of ``theta`` is
``tr(M^+)``. At the kink ``P_N theta = 0`` the null-space coefficients stay
pinned, so ``U`` is replaced by its part orthogonal to ``null(D)``.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .certify import face_basis
from .exceptions import CriterionMismatchError, DomainError, SizeLimitError, UnsupportedFamilyError
from .expfam import get_family, h_curvature, h_score, link_inverse, make_rng
from .lattice import L_Jp, LatticeSpec, NullSpaceBasis, SparseOperator, null_index_mask
from .solver import FitConfig, FitResult, fit_mean_tf, fit_mle_tf

SCHEMA_VERSION = 1
# dense divergence computations above this many vertices are refused
DIVERGENCE_LIMIT = 4096
# relative eigenvalue cutoff of the pseudo-inverse
PINV_RTOL = 1e-10

CRITERIA = ("sure", "sukl", "pukl", "gsure", "ekl")


class BoundaryWarning(UserWarning):
    """The active set changed inside a finite-difference stencil."""


@dataclass
class ActiveSet:
    """Fused rows of ``D`` at a fit and an orthonormal basis of ``null(D_breve)``.

    When the basis consists of normalized indicators of disjoint blocks,
    ``labels`` maps each vertex to its block and the dense basis is only
    built on first access.
    """

    kept_rows: np.ndarray
    D_breve: SparseOperator
    dense_basis: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def null_basis(self) -> np.ndarray:
        if self.dense_basis is None:
            n, k = self.labels.size, self.dim
            sizes = np.bincount(self.labels, minlength=k)
            U = np.zeros((n, k))
            U[np.arange(n), self.labels] = 1.0 / np.sqrt(sizes[self.labels])
            self.dense_basis = U
        return self.dense_basis

    @property
    def dim(self) -> int:
        if self.labels is not None:
            return int(self.labels.max()) + 1 if self.labels.size else 0
        return self.null_basis.shape[1]

    @property
    def null_projector(self) -> np.ndarray:
        U = self.null_basis
        return U @ U.T


def _fused(D: SparseOperator, theta: np.ndarray, active_tol: float, fit: FitResult | None) -> np.ndarray:
    Dt = D.matvec(theta)
    scale = 1.0 + (float(np.max(np.abs(Dt))) if Dt.size else 0.0)
    mask = np.abs(Dt) <= active_tol * scale
    if fit is not None and fit.z.shape == Dt.shape:
        mask |= fit.z == 0
    return mask


def active_rows(D: SparseOperator, theta_hat, active_tol: float = 1e-6,
                fit: FitResult | None = None, basis: NullSpaceBasis | None = None) -> ActiveSet:
    """Rows with ``|D theta| <= active_tol (1 + ||D theta||_inf)`` and their null space.

    When ``fit`` is given, rows its split variable set exactly to zero are
    also kept.
    """
    if active_tol <= 0:
        raise ValueError("active_tol must be positive")
    theta = np.asarray(theta_hat, dtype=float)
    n = theta.size
    if n > DIVERGENCE_LIMIT:
        raise SizeLimitError(f"dense active-set basis for n = {n} exceeds the desk-scale limit")
    mask = _fused(D, theta, active_tol, fit)
    rows = np.flatnonzero(mask)
    fb = face_basis(D, mask, basis)
    D_breve = SparseOperator(D.matrix[rows].tocsr())
    if fb.sparse:
        return ActiveSet(rows, D_breve, labels=np.asarray(fb.labels, dtype=int))
    return ActiveSet(rows, D_breve, np.asarray(fb.B))


def _pinv_sym(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w.size == 0:
        return M
    keep = w > PINV_RTOL * max(float(w.max()), 0.0)
    return (V[:, keep] / w[keep]) @ V[:, keep].T


def _face_system(fam, theta, active: ActiveSet, lambda2: float, basis: NullSpaceBasis | None,
                 null_tol: float = 1e-9):
    U = active.null_basis
    n = theta.size
    w = fam.psi_double_prime(theta)
    lam2n = n * lambda2
    extra = None
    if lam2n > 0:
        if basis is None:
            raise ValueError("lambda2 > 0 needs a null-space basis")
        Q = basis.Q
        c = Q.T @ theta
        nc = float(np.linalg.norm(c))
        if nc <= null_tol * (1.0 + float(np.max(np.abs(theta)))):
            # pinned at the kink: drop the null-space directions
            Up = U - Q @ (Q.T @ U)
            u_, s_, _ = np.linalg.svd(Up, full_matrices=False)
            U = u_[:, s_ > 1e-8 * max(1.0, float(s_.max(initial=0.0)))]
        else:
            e = c / nc
            QU = Q.T @ U
            eU = e @ QU
            extra = (lam2n / nc) * (QU.T @ QU - np.outer(eU, eU))
    WU = w[:, None] * U
    G = U.T @ WU
    M = G if extra is None else G + extra
    return U, G, M


def _block_weights(w: np.ndarray, active: ActiveSet, lam2n: float) -> np.ndarray | None:
    # disjoint block indicators without the null-space term: the face system is diagonal
    if active.labels is None or lam2n > 0:
        return None
    return np.bincount(active.labels, weights=w, minlength=active.dim)


def divergence_trace(family, theta_hat, active: ActiveSet, lambda2: float = 0.0,
                     basis: NullSpaceBasis | None = None, target: str = "beta") -> float:
    """Divergence of ``beta_hat(y)`` (or ``theta_hat(y)`` with ``target='theta'``) on the active face.

    ``lambda2`` is in per-observation units.
    """
    fam = get_family(family)
    theta = np.asarray(theta_hat, dtype=float)
    if theta.size > DIVERGENCE_LIMIT:
        raise SizeLimitError(f"dense divergence for n = {theta.size} exceeds the desk-scale limit")
    if target not in ("beta", "theta"):
        raise ValueError("target must be 'beta' or 'theta'")
    w = fam.psi_double_prime(theta)
    wb = _block_weights(w, active, theta.size * lambda2)
    if wb is not None:
        keep = wb > PINV_RTOL * max(float(wb.max(initial=0.0)), 0.0)
        sizes = np.bincount(active.labels, minlength=active.dim)
        return float(np.count_nonzero(keep)) if target == "beta" else float(np.sum(sizes[keep] / wb[keep]))
    U, G, M = _face_system(fam, theta, active, lambda2, basis)
    if U.shape[1] == 0:
        return 0.0
    if G is M and np.ptp(w) == 0.0:
        # constant curvature on an orthonormal basis: M = w I
        return float(U.shape[1]) if target == "beta" else float(U.shape[1] / w[0])
    Mp = _pinv_sym(M)
    if target == "theta":
        return float(np.trace(Mp))
    return float(np.sum(Mp * G))


def jacobian_diagonal(family, theta_hat, active: ActiveSet, lambda2: float = 0.0,
                      basis: NullSpaceBasis | None = None, target: str = "theta") -> np.ndarray:
    """Diagonal of ``d theta_hat / dy`` (or ``d beta_hat / dy``) on the active face."""
    fam = get_family(family)
    theta = np.asarray(theta_hat, dtype=float)
    if target not in ("beta", "theta"):
        raise ValueError("target must be 'beta' or 'theta'")
    w = fam.psi_double_prime(theta)
    wb = _block_weights(w, active, theta.size * lambda2)
    if wb is not None:
        keep = wb > PINV_RTOL * max(float(wb.max(initial=0.0)), 0.0)
        inv = np.where(keep, 1.0 / np.where(keep, wb, 1.0), 0.0)
        diag = inv[active.labels]
        return diag * w if target == "beta" else diag
    U, _, M = _face_system(fam, theta, active, lambda2, basis)
    if U.shape[1] == 0:
        return np.zeros(theta.size)
    diag = np.einsum("ia,ia->i", U @ _pinv_sym(M), U)
    return diag * fam.psi_double_prime(theta) if target == "beta" else diag


def numeric_divergence(refit: Callable[[np.ndarray], FitResult | np.ndarray], y,
                       eps: float | None = None, active_tol: float = 1e-6,
                       D: SparseOperator | None = None) -> float:
    """Central finite-difference divergence ``sum_i d beta_i / d y_i``.

    ``refit`` maps data to a fit (or directly to ``beta``). When it returns
    fits and ``D`` is given, a ``BoundaryWarning`` is issued if the active
    set differs across a stencil.
    """
    y = np.asarray(y, dtype=float)
    if eps is None:
        eps = 1e-4 * (1.0 + float(np.max(np.abs(y))))
    base_mask = None
    base = refit(y)
    if isinstance(base, FitResult) and D is not None:
        base_mask = _fused(D, base.theta_hat, active_tol, None)
    total = 0.0
    boundary = 0
    for i in range(y.size):
        vals = []
        for sgn in (1.0, -1.0):
            yy = y.copy()
            yy[i] += sgn * eps
            out = refit(yy)
            if isinstance(out, FitResult):
                if base_mask is not None and not np.array_equal(_fused(D, out.theta_hat, active_tol, None),
                                                                base_mask):
                    boundary += 1
                out = out.beta_hat
            vals.append(np.asarray(out)[i])
        total += (vals[0] - vals[1]) / (2.0 * eps)
    if boundary:
        warnings.warn(f"active set changed in {boundary} stencil evaluations", BoundaryWarning)
    return float(total)


def make_refit(family, D: SparseOperator, basis: NullSpaceBasis | None, config: FitConfig,
               warm: FitResult | None = None, estimator: str = "mle",
               tol: float | None = 1e-10) -> Callable[[np.ndarray], FitResult]:
    """Solver handle ``y -> FitResult`` at fixed penalties, warm-started from ``warm``."""
    cfg = config if tol is None else replace(config, tol_abs=tol, tol_rel=tol)
    if estimator not in ("mle", "mean"):
        raise ValueError("estimator must be 'mle' or 'mean'")

    def refit(y):
        if estimator == "mean":
            return fit_mean_tf(y, D, cfg, basis, warm=warm)
        return fit_mle_tf(y, family, D, basis, cfg, warm=warm)

    return refit


# criteria -------------------------------------------------------------------

def sure(y, beta_hat, divergence: float, sigma_sq: float) -> float:
    """``||y - beta||^2 - n sigma^2 + 2 sigma^2 div``."""
    if sigma_sq <= 0:
        raise ValueError("sigma_sq must be positive")
    y = np.asarray(y, dtype=float)
    r = y - np.asarray(beta_hat, dtype=float)
    return float(r @ r - y.size * sigma_sq + 2.0 * sigma_sq * divergence)


def sukl(y, theta_hat, beta_hat, divergence: float, family) -> float:
    """Unbiased for ``E KL(theta_hat || theta*) - sum psi(theta*)`` (continuous families).

    The underlying Stein identity needs a base measure ``h`` differentiable on
    the whole line. For the exponential, ``h`` jumps at ``y = 0`` and the
    estimate misses ``-sum theta*_i beta_i(y_i = 0)``, a term that grows with
    the penalty; :func:`ekl` avoids it.
    """
    fam = get_family(family)
    if fam.h_score_fn is None:
        raise UnsupportedFamilyError(f"SUKL needs a continuous family; {fam.name} is discrete (use PUKL)")
    theta = np.asarray(theta_hat, dtype=float)
    beta = np.asarray(beta_hat, dtype=float)
    return float((theta + h_score(fam, y)) @ beta + divergence - np.sum(fam.psi(theta)))


def gsure(y, theta_hat, divergence_theta: float, family) -> float:
    """Unbiased for ``E ||theta_hat - theta*||^2`` (continuous families)."""
    fam = get_family(family)
    theta = np.asarray(theta_hat, dtype=float)
    return float(theta @ theta + 2.0 * (h_score(fam, y) @ theta) + 2.0 * divergence_theta
                 + np.sum(h_curvature(fam, y)))


def ekl(y, theta_hat, jac_theta_diag, family) -> float:
    """Estimate of ``E KL(theta* || theta_hat)`` up to a constant, exponential family.

    Uses ``E[beta*_i f(Y)] = E[int_0^{Y_i} f]`` with the integral expanded to
    first order along the active face, ``y_i theta_i - y_i^2 J_ii / 2``.
    Exact when ``theta_i`` is affine in ``y_i`` on ``[0, y_i]``.
    """
    fam = get_family(family)
    if fam.name != "exponential":
        raise UnsupportedFamilyError(f"EKL is for exponential data, not {fam.name}")
    y = np.asarray(y, dtype=float)
    theta = np.asarray(theta_hat, dtype=float)
    J = np.asarray(jac_theta_diag, dtype=float)
    return float(np.sum(fam.psi(theta)) - y @ theta + 0.5 * (y * y) @ J)


def _check_counts(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DomainError("PUKL needs non-negative integer counts")
    return y


def pukl(y, refit: Callable[[np.ndarray], FitResult], fit: FitResult | None = None,
         subsample: int | None = None, seed=0) -> float:
    """``||beta(y)||_1 - sum_{y_i > 0} y_i log beta(y - e_i)_i`` for Poisson counts.

    Each downdated fit is one call of ``refit``. With ``subsample`` only a
    random subset of the positive coordinates is refitted and the sum is
    scaled up, which is an approximation.
    """
    y = _check_counts(y)
    base = fit if fit is not None else refit(y)
    total = float(np.sum(np.abs(base.beta_hat)))
    pos = np.flatnonzero(y > 0)
    scale = 1.0
    if subsample is not None and subsample < pos.size:
        rng = make_rng(seed)
        scale = pos.size / subsample
        pos = np.sort(rng.choice(pos, size=subsample, replace=False))
    acc = 0.0
    for i in pos:
        yy = y.copy()
        yy[i] -= 1.0
        b = refit(yy).beta_hat[i]
        if not b > 0:
            return float("inf")
        acc += y[i] * np.log(b)
    return total - scale * acc


# theory and noise scale -----------------------------------------------------

def theory_lambda(spec: LatticeSpec, nu, b, t: float = 1.0, mu: float = 1.0,
                  J: np.ndarray | None = None, mode: str = "mle") -> tuple[float, float]:
    """Theory-guided penalties from sub-exponential parameters ``(nu, b)``.

    ``A = 2 t mu sqrt(kappa/n) max(||nu||_2, ||b||_inf)`` and
    ``B = 2 t max(min(||nu||_inf L_2, ||nu||_2 L_1), ||b||_inf L_1)``, with
    ``L_p = L_{J,p}``. Returns ``(2B/n, 2A/n)``, or ``(B/n, 0)`` in mean mode.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if mode not in ("mle", "mean"):
        raise ValueError("mode must be 'mle' or 'mean'")
    n = spec.n
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (n,))
    b = np.broadcast_to(np.asarray(b, dtype=float), (n,))
    if np.any(nu < 0) or np.any(b < 0):
        raise ValueError("nu and b must be non-negative")
    if J is None:
        J = null_index_mask(spec)
    nu2, nuinf, binf = float(np.linalg.norm(nu)), float(np.max(nu)), float(np.max(b))
    L1 = L_Jp(spec, J, 1.0, mu)
    L2 = L_Jp(spec, J, 2.0, mu)
    B = 2.0 * t * max(min(nuinf * L2, nu2 * L1), binf * L1)
    A = 2.0 * t * mu * np.sqrt(spec.nullity / n) * max(nu2, binf)
    if mode == "mean":
        return B / n, 0.0
    return 2.0 * B / n, 2.0 * A / n


def estimate_sigma_sq(y, dims: Sequence[int] | None = None) -> float:
    """Robust noise variance: MAD of first differences along the last axis, over sqrt(2).

    A heuristic for running SURE on data whose variance is not known.
    """
    y = np.asarray(y, dtype=float)
    arr = y.reshape(tuple(dims)) if dims is not None else y
    d = np.diff(arr, axis=-1).ravel()
    if d.size == 0:
        raise ValueError("need at least two values along the last axis")
    mad = float(np.median(np.abs(d - np.median(d)))) / 0.6744897501960817
    sigma = mad / np.sqrt(2.0)
    return max(sigma * sigma, np.finfo(float).tiny)


# tuning ---------------------------------------------------------------------

@dataclass
class RiskReport:
    """Criterion values over a penalty grid, in grid order."""

    criterion: str
    values: list[tuple[float, float, float, float]]
    selected: int
    approximate: bool = False
    df_sensitivity: list[tuple[float, float]] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    fits: list[FitResult] = field(default_factory=list, repr=False)

    @property
    def selected_lambda(self) -> tuple[float, float]:
        l1, l2, _, _ = self.values[self.selected]
        return l1, l2

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "criterion": self.criterion,
            "approximate": self.approximate,
            "selected": self.selected,
            "selected_lambda1": self.values[self.selected][0],
            "selected_lambda2": self.values[self.selected][1],
            "values": [{"lambda1": l1, "lambda2": l2, "risk": r if np.isfinite(r) else None, "df": d,
                        "df_low_tol": s[0], "df_high_tol": s[1], "converged": c}
                       for (l1, l2, r, d), s, c in zip(self.values, self.df_sensitivity, self.converged)],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


_CONTINUOUS = ("gaussian", "exponential", "chisq")


def check_criterion(criterion: str, family, estimator: str = "mle", allow_heuristic: bool = False) -> None:
    """Raises ``CriterionMismatchError`` unless the criterion fits the data family.

    ``allow_heuristic`` admits SURE with a plug-in variance for non-gaussian
    MLE fits, where it is a heuristic rather than an unbiased estimate.
    """
    fam = get_family(family)
    if criterion not in CRITERIA:
        raise CriterionMismatchError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    if criterion == "ekl" and fam.name != "exponential":
        raise CriterionMismatchError(f"EKL is for exponential data, not {fam.name}")
    if criterion == "pukl" and fam.name != "poisson":
        raise CriterionMismatchError(f"PUKL is for poisson data, not {fam.name}")
    if criterion in ("sukl", "gsure") and fam.name not in _CONTINUOUS:
        alt = "PUKL" if fam.name == "poisson" else "none"
        raise CriterionMismatchError(f"{criterion.upper()} needs a continuous family; for {fam.name} use {alt}")
    if criterion == "sure" and fam.name != "gaussian" and estimator != "mean" and not allow_heuristic:
        alt = "PUKL" if fam.name == "poisson" else ("SUKL" if fam.name in _CONTINUOUS else "the mean estimator")
        raise CriterionMismatchError(f"SURE for the {fam.name} MLE trend filter is not unbiased; use {alt}")


def _natural(fam, beta, n):
    # mean-scale fits are mapped to natural parameters just inside the mean domain
    return link_inverse(fam, beta, eps=1.0 / (4.0 * n))


def evaluate_criterion(criterion: str, y, family, fit: FitResult, D: SparseOperator,
                       basis: NullSpaceBasis | None, config: FitConfig, estimator: str = "mle",
                       sigma_sq: float | None = None, active_tol: float | None = None,
                       pukl_subsample: int | None = None, seed=0) -> tuple[float, float, tuple[float, float]]:
    """``(risk, df, (df at tol/10, df at tol*10))`` of one fit."""
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    n = y.size
    tol = config.active_tol if active_tol is None else active_tol
    fit_fam = "gaussian" if estimator == "mean" else fam
    lam2 = 0.0 if estimator == "mean" else config.lambda2
    target = "theta" if criterion == "gsure" else "beta"

    def df_at(t):
        act = active_rows(D, fit.theta_hat, t, fit=fit, basis=basis)
        return divergence_trace(fit_fam, fit.theta_hat, act, lam2, basis, target=target)

    df = df_at(tol)
    sens = (df_at(tol / 10.0), df_at(tol * 10.0))
    if estimator == "mean":
        beta = fit.beta_hat
        lo, hi = fam.mean_domain
        inside = np.all(beta > lo) and np.all(beta < hi)
        theta = _natural(fam, beta, n) if criterion in ("sukl", "gsure", "ekl") else None
    else:
        beta, theta, inside = fit.beta_hat, fit.theta_hat, True
    if criterion == "sure":
        s2 = sigma_sq if sigma_sq is not None else (1.0 if fam.name == "gaussian" else estimate_sigma_sq(y))
        risk = sure(y, beta, df, s2)
    elif criterion == "sukl":
        risk = sukl(y, theta, beta, df, fam) if inside else float("inf")
    elif criterion == "gsure":
        if estimator == "mean":
            raise CriterionMismatchError("GSURE needs the divergence of the natural parameter; use the mle estimator")
        risk = gsure(y, theta, df, fam)
    elif criterion == "ekl":
        if not inside:
            return float("inf"), float(df), sens
        act = active_rows(D, fit.theta_hat, tol, fit=fit, basis=basis)
        J = jacobian_diagonal(fit_fam, fit.theta_hat, act, lam2, basis, target="beta")
        theta = theta if theta is not None else _natural(fam, beta, n)
        # chain rule through the mean map for mean-scale fits
        Jt = J / fam.psi_double_prime(theta) if estimator == "mean" else J / fam.psi_double_prime(fit.theta_hat)
        risk = ekl(y, theta, Jt, fam)
    else:
        refit = make_refit(fam, D, basis, config, warm=fit, estimator=estimator, tol=None)
        risk = pukl(y, refit, fit=fit, subsample=pukl_subsample, seed=seed)
    return float(risk), float(df), sens


def tune(y, family, D: SparseOperator, basis: NullSpaceBasis | None, lambda1_grid: Sequence[float],
         lambda2_grid: Sequence[float] = (0.0,), criterion: str = "sukl", config: FitConfig = FitConfig(),
         estimator: str = "mle", sigma_sq: float | None = None, pukl_subsample: int | None = None,
         seed=0, workers: int = 1, allow_heuristic: bool = False) -> RiskReport:
    """Fits every grid point and selects the minimizer of the risk estimate.

    For each ``lambda2`` the ``lambda1`` grid is solved as a warm-started
    path in increasing order; results are reported in the given grid order,
    ``lambda1`` varying fastest. ``estimator='mean'`` tunes the mean trend
    filter (``lambda2`` ignored) against the chosen criterion.
    ``allow_heuristic`` is passed to :func:`check_criterion`.
    """
    fam = get_family(family)
    check_criterion(criterion, fam, estimator, allow_heuristic)
    l1 = np.asarray(lambda1_grid, dtype=float)
    l2 = np.asarray(lambda2_grid, dtype=float)
    if l1.size == 0 or l2.size == 0:
        raise ValueError("grids must be non-empty")
    if estimator == "mean":
        l2 = np.zeros(1)
    y = np.asarray(y, dtype=float)
    order = np.argsort(l1, kind="stable")

    def run_lambda2(lam2):
        fits = [None] * l1.size
        warm = None
        for idx in order:
            cfg = replace(config, lambda1=float(l1[idx]), lambda2=float(lam2))
            if estimator == "mean":
                f = fit_mean_tf(y, D, cfg, basis, warm=warm)
            else:
                f = fit_mle_tf(y, fam, D, basis, cfg, warm=warm)
            if not f.diverged:
                warm = f
            fits[idx] = (f, cfg)
        return fits

    def score(item):
        f, cfg = item
        return evaluate_criterion(criterion, y, fam, f, D, basis, cfg, estimator, sigma_sq,
                                  pukl_subsample=pukl_subsample, seed=seed)

    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        per_l2 = list(pool.map(run_lambda2, l2))
        items = [it for fits in per_l2 for it in fits]
        scores = list(pool.map(score, items))
    values, sens, conv, fits = [], [], [], []
    for (f, cfg), (risk, df, s) in zip(items, scores):
        values.append((f.lambda1, cfg.lambda2, risk, df))
        sens.append(s)
        conv.append(bool(f.converged))
        fits.append(f)
    risks = np.array([v[2] for v in values])
    finite = np.isfinite(risks)
    selected = int(np.argmin(np.where(finite, risks, np.inf))) if finite.any() else 0
    return RiskReport(criterion, values, selected, approximate=(pukl_subsample is not None and criterion == "pukl") or criterion == "ekl",
                      df_sensitivity=sens, converged=conv, fits=fits)
