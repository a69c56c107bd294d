"""Primal-dual interior-point method for ``sum psi(theta) - y^T theta + lam ||D theta||_1``.

The TV term is written as ``lam 1^T t`` subject to ``-t <= D theta <= t``.
Eliminating ``t`` and the multipliers from the Newton system leaves one
sparse symmetric positive definite system per step,

    (diag psi''(theta) + D^T W D) dtheta = r,

which a sparse direct solver handles cheaply on lattices. The multipliers
give the TV subgradient ``s = (nu1 - nu2) / lam`` in the open unit box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .expfam import Family
from .lattice import SparseOperator

# centering factor, line-search constants and step-to-boundary fraction
_MU = 10.0
_ALPHA = 0.01
_BETA = 0.5
_FRAC = 0.99
# iterative refinement sweeps on each Newton solve
_REFINE = 2


@dataclass
class IPMTrace:
    gaps: list[float] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)


def _in_domain(fam: Family, theta: np.ndarray) -> bool:
    lo, hi = fam.theta_domain
    return bool(np.all(theta > lo) and np.all(theta < hi) and np.all(np.isfinite(theta)))


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def pdip_tv(fam: Family, y: np.ndarray, D: SparseOperator, lam: float, theta0: np.ndarray,
            max_iter: int, accept: Callable[[np.ndarray, np.ndarray, float], bool],
            gap_floor: float = 1e-14) -> tuple[np.ndarray, np.ndarray, int, bool, IPMTrace]:
    """Runs until ``accept(theta, s, gap)`` holds, the gap stalls or ``max_iter`` steps.

    Returns ``(theta, s, iterations, accepted, trace)``.
    """
    M = D.matrix
    Mt = M.T.tocsr()
    m = M.shape[0]
    theta = np.array(theta0, dtype=float)
    z = M @ theta
    t = 1.1 * np.abs(z) + 1e-2 * (1.0 + float(np.max(np.abs(z)) if m else 0.0))
    nu1 = np.full(m, 0.5 * lam)
    nu2 = np.full(m, 0.5 * lam)
    trace = IPMTrace()
    s = (nu1 - nu2) / lam

    def residuals(theta, t, nu1, nu2, tau):
        z = M @ theta
        a = t - z
        b = t + z
        r_th = fam.psi_prime(theta) - y + Mt @ (nu1 - nu2)
        r_t = lam - nu1 - nu2
        r_c1 = nu1 * a - 1.0 / tau
        r_c2 = nu2 * b - 1.0 / tau
        return r_th, r_t, r_c1, r_c2, a, b

    it = 0
    for it in range(1, max_iter + 1):
        z = M @ theta
        a = t - z
        b = t + z
        gap = float(a @ nu1 + b @ nu2)
        tau = _MU * 2 * m / max(gap, 1e-300)
        r_th, r_t, r_c1, r_c2, a, b = residuals(theta, t, nu1, nu2, tau)
        trace.gaps.append(gap)
        trace.residuals.append(float(np.linalg.norm(r_th)))
        s = (nu1 - nu2) / lam
        if accept(theta, s, gap):
            return theta, s, it, True, trace
        if gap <= gap_floor * (1.0 + abs(lam) * m):
            break

        s1 = nu1 / a
        s2 = nu2 / b
        S = s1 + s2
        dl = s1 - s2
        c0 = -r_c1 / a - r_c2 / b - r_t
        c1 = -r_c1 / a + r_c2 / b
        wdiag = 4.0 * s1 * s2 / S
        H = (sp.diags(fam.psi_double_prime(theta)) + Mt @ sp.diags(wdiag) @ M).tocsc()
        rhs = -r_th - Mt @ (c1 - dl * c0 / S)
        try:
            # SPD: no pivoting keeps the fill-reducing order
            lu = splu(H, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options={"SymmetricMode": True})
            dth = lu.solve(rhs)
            for _ in range(_REFINE):
                dth = dth + lu.solve(rhs - H @ dth)
        except RuntimeError:
            break
        w = M @ dth
        dt = (c0 + dl * w) / S
        dnu1 = (-r_c1 - nu1 * (dt - w)) / a
        dnu2 = (-r_c2 - nu2 * (dt + w)) / b

        step = min(_max_step(nu1, dnu1), _max_step(nu2, dnu2))
        step = min(1.0, _FRAC * step) if step < 1.0 else 1.0
        # keep the slacks positive
        step = min(step, _FRAC * _max_step(a, dt - w) if np.any(dt - w < 0) else step)
        step = min(step, _FRAC * _max_step(b, dt + w) if np.any(dt + w < 0) else step)
        base = np.sqrt(r_th @ r_th + r_t @ r_t + r_c1 @ r_c1 + r_c2 @ r_c2)
        while step > 1e-14:
            th_new = theta + step * dth
            if _in_domain(fam, th_new):
                t_new = t + step * dt
                n1 = nu1 + step * dnu1
                n2 = nu2 + step * dnu2
                rr = residuals(th_new, t_new, n1, n2, tau)
                if np.all(rr[4] > 0) and np.all(rr[5] > 0):
                    val = np.sqrt(sum(float(v @ v) for v in rr[:4]))
                    if val <= (1.0 - _ALPHA * step) * base:
                        break
            step *= _BETA
        else:
            break
        theta, t, nu1, nu2 = th_new, t_new, n1, n2
    return theta, s, it, False, trace
