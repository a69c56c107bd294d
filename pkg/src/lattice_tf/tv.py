"""Exact proximal map of 1d total variation along lattice lines.

``tv1d_denoise`` implements the direct algorithm of Condat (2013) for
``argmin_x 1/2 ||x - v||^2 + a sum_i |x_{i+1} - x_i|``, exact up to rounding
and linear in practice. The running bounds are kept in a small state array
rather than scalar locals, which numba compiles reliably.
"""

from __future__ import annotations

import numba
import numpy as np

# state slots
_VMIN, _VMAX, _UMIN, _UMAX = 0, 1, 2, 3


@numba.njit(cache=True)
def _tv1d(inp, lam, out):
    width = inp.size
    if width == 1 or lam == 0.0:
        for i in range(width):
            out[i] = inp[i]
        return
    st = np.empty(4)
    k = 0
    k0 = 0
    kplus = 0
    kminus = 0
    st[_UMIN] = lam
    st[_UMAX] = -lam
    st[_VMIN] = inp[0] - lam
    st[_VMAX] = inp[0] + lam
    twolam = 2.0 * lam
    minlam = -lam
    while True:
        if k == width - 1:
            if st[_UMIN] < 0.0:
                for i in range(k0, kminus + 1):
                    out[i] = st[_VMIN]
                k0 = kminus + 1
                k = k0
                kminus = k0
                st[_VMIN] = inp[k0]
                st[_UMIN] = lam
                st[_UMAX] = st[_VMIN] + st[_UMIN] - st[_VMAX]
                continue
            elif st[_UMAX] > 0.0:
                for i in range(k0, kplus + 1):
                    out[i] = st[_VMAX]
                k0 = kplus + 1
                k = k0
                kplus = k0
                st[_VMAX] = inp[k0]
                st[_UMAX] = minlam
                st[_UMIN] = st[_VMAX] + st[_UMAX] - st[_VMIN]
                continue
            else:
                st[_VMIN] = st[_VMIN] + st[_UMIN] / (k - k0 + 1)
                for i in range(k0, k + 1):
                    out[i] = st[_VMIN]
                return
        st[_UMIN] = st[_UMIN] + inp[k + 1] - st[_VMIN]
        if st[_UMIN] < minlam:
            for i in range(k0, kminus + 1):
                out[i] = st[_VMIN]
            k0 = kminus + 1
            k = k0
            kminus = k0
            kplus = k0
            st[_VMIN] = inp[k0]
            st[_VMAX] = st[_VMIN] + twolam
            st[_UMIN] = lam
            st[_UMAX] = minlam
        else:
            st[_UMAX] = st[_UMAX] + inp[k + 1] - st[_VMAX]
            if st[_UMAX] > lam:
                for i in range(k0, kplus + 1):
                    out[i] = st[_VMAX]
                k0 = kplus + 1
                k = k0
                kminus = k0
                kplus = k0
                st[_VMAX] = inp[k0]
                st[_VMIN] = st[_VMAX] - twolam
                st[_UMIN] = lam
                st[_UMAX] = minlam
            else:
                k += 1
                if st[_UMIN] >= lam:
                    kminus = k
                    st[_VMIN] = st[_VMIN] + (st[_UMIN] - lam) / (kminus - k0 + 1)
                    st[_UMIN] = lam
                if st[_UMAX] <= minlam:
                    kplus = k
                    st[_VMAX] = st[_VMAX] + (st[_UMAX] + lam) / (kplus - k0 + 1)
                    st[_UMAX] = minlam


@numba.njit(cache=True)
def _tv_rows(X, lam, out):
    for i in range(X.shape[0]):
        _tv1d(X[i], lam, out[i])


def tv1d_denoise(v, a: float) -> np.ndarray:
    """``argmin_x 1/2 ||x - v||^2 + a ||D x||_1`` for first differences ``D``."""
    if a < 0:
        raise ValueError("penalty must be non-negative")
    v = np.ascontiguousarray(v, dtype=float)
    out = np.empty_like(v)
    if v.size:
        _tv1d(v, float(a), out)
    return out


def tv_lines(x: np.ndarray, dims: tuple[int, ...], axis: int, a: float) -> np.ndarray:
    """Apply ``tv1d_denoise`` to every lattice line along ``axis`` of a flat vector."""
    arr = np.moveaxis(x.reshape(dims), axis, -1)
    rows = np.ascontiguousarray(arr).reshape(-1, dims[axis])
    out = np.empty_like(rows)
    _tv_rows(rows, float(a), out)
    return np.moveaxis(out.reshape(arr.shape), -1, axis).reshape(-1)


def line_subgradient(r: np.ndarray, dims: tuple[int, ...], axis: int) -> np.ndarray:
    """Solve ``D_axis^T s = r`` line by line, returning the per-edge ``s``.

    ``r`` must sum to zero along every line (it lies in the row space).
    Rows of the result follow the Kronecker block ordering of
    ``build_diff_lattice`` for that axis.
    """
    arr = np.moveaxis(r.reshape(dims), axis, -1)
    # (D^T s)_i = s_{i-1} - s_i, so s_i = -cumsum(r)_i
    s = -np.cumsum(arr, axis=-1)[..., :-1]
    return np.moveaxis(s, -1, axis).reshape(-1)
