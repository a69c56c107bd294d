"""One-parameter natural exponential families and their scalar primitives.

All maps are vectorized over numpy arrays. A family is described by its
log-partition ``psi`` and derivatives; the density of the natural statistic
is ``h(y) exp(theta * y - psi(theta))``.

Supported families and parameterizations:

* ``gaussian``: unit variance, ``psi = theta^2 / 2``.
* ``poisson``: ``psi = exp(theta)``.
* ``exponential``: ``psi = -log(-theta)`` on ``theta < 0``, mean ``-1/theta``.
* ``binomial``: a single Bernoulli trial, ``psi = log(1 + exp(theta))``.
* ``chisq``: ``psi = log(Gamma(theta + 1) 2^(theta + 1))``. The natural
  statistic is ``log(y)`` of a chi-squared draw with ``2 (theta + 1)``
  degrees of freedom; raw observations must be log-transformed first.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special

from .exceptions import DomainError, UnsupportedFamilyError

ArrayFn = Callable[[np.ndarray], np.ndarray]
LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class SubExpParams:
    """Sub-exponential parameters ``(nu^2, b)`` of a centered observation."""

    nu_sq: np.ndarray | float
    b: np.ndarray | float


@dataclass(frozen=True, eq=False)
class Family:
    name: str
    psi: ArrayFn
    psi_prime: ArrayFn
    psi_double_prime: ArrayFn
    link_inverse_fn: ArrayFn
    theta_domain: tuple[float, float]
    mean_domain: tuple[float, float]
    sufficient_stat: ArrayFn
    discrete: bool
    prox_fn: Callable[..., np.ndarray]
    subexp_fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    sampler: Callable[[np.random.Generator, np.ndarray], np.ndarray]
    h_score_fn: Optional[ArrayFn] = None
    h_curvature_fn: Optional[ArrayFn] = None
    bregman_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    @property
    def continuous(self) -> bool:
        return not self.discrete

    def __repr__(self) -> str:
        return f"Family({self.name!r})"


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


def check_theta(family: Family, theta) -> np.ndarray:
    theta = _as_array(theta)
    lo, hi = family.theta_domain
    if not np.all(np.isfinite(theta)) or np.any(theta <= lo) or np.any(theta >= hi):
        raise DomainError(f"natural parameter outside the {family.name} domain ({lo}, {hi})")
    return theta


def _safeguarded_newton(f, fprime, lo, hi, x0, scale, max_iter=500):
    """Vectorized Newton iteration safeguarded by a maintained sign bracket.

    Requires ``f(lo) <= 0 <= f(hi)`` elementwise with ``f`` increasing.
    Stops where ``|f(x)| <= 1e-13 scale(x)``, ``scale`` the magnitude of the
    terms of ``f``, or where the bracket has no representable interior.
    """
    lo = lo.copy()
    hi = hi.copy()
    x = np.clip(x0, lo, hi)
    for _ in range(max_iter):
        fx = f(x)
        done = np.abs(fx) <= _RTOL * scale(x)
        if np.all(done):
            break
        neg = fx < 0
        lo = np.where(neg & ~done, x, lo)
        hi = np.where(~neg & ~done, x, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            step = x - fx / fprime(x)
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        step = np.where(bad, 0.5 * (lo + hi), step)
        # bracket collapsed to adjacent floats: no representable improvement
        stuck = (hi - lo) <= 2 * np.spacing(np.maximum(np.abs(lo), np.abs(hi)))
        x = np.where(done | stuck, x, step)
        if np.all(done | stuck):
            break
    return x


_RTOL = 1e-13


def _prox_scale(psi_prime, mu, b):
    # magnitude of the terms of psi'(x) + mu x - b
    return lambda x: np.abs(psi_prime(x)) + np.abs(mu * x) + np.abs(b)


# gaussian ------------------------------------------------------------------

def _gauss_prox(mu, b, x0=None):
    return b / (1.0 + mu)


# poisson -------------------------------------------------------------------

def _pois_prox(mu, b, x0=None):
    mu = np.broadcast_to(_as_array(mu), np.shape(b))
    with np.errstate(divide="ignore"):
        lo = np.minimum((b - 1.0) / mu, 0.0)
        hi = np.where(b > 1.0, np.minimum(b / mu, np.log(np.maximum(b, 1.0))), np.minimum(b / mu, 0.0))
    start = hi if x0 is None else np.where((x0 > lo) & (x0 < hi), x0, hi)
    with np.errstate(over="ignore"):
        return _safeguarded_newton(lambda x: np.exp(x) + mu * x - b, lambda x: np.exp(x) + mu,
                                   lo, hi, start, _prox_scale(np.exp, mu, b))


def _pois_bregman(t0, t1):
    d = t1 - t0
    return np.exp(t0) * (np.expm1(d) - d)


# exponential ---------------------------------------------------------------

def _exp_prox(mu, b, x0=None):
    root = np.sqrt(b * b + 4.0 * mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = -2.0 / (b + root)
        neg = (b - root) / (2.0 * mu)
    return np.where(b > 0, pos, neg)


def _exp_bregman(t0, t1):
    r = t1 / t0
    return (r - 1.0) - np.log(r)


# binomial ------------------------------------------------------------------

def _binom_prox(mu, b, x0=None):
    mu = np.broadcast_to(_as_array(mu), np.shape(b))
    lo = (b - 1.0) / mu
    hi = b / mu
    start = 0.5 * (lo + hi) if x0 is None else np.where((x0 > lo) & (x0 < hi), x0, 0.5 * (lo + hi))
    sig = special.expit
    return _safeguarded_newton(lambda x: sig(x) + mu * x - b, lambda x: sig(x) * (1.0 - sig(x)) + mu,
                               lo, hi, start, _prox_scale(sig, mu, b))


def _binom_link_inverse(m):
    return special.logit(m)


# chi-squared ---------------------------------------------------------------

def _chisq_psi(theta):
    return special.gammaln(theta + 1.0) + (theta + 1.0) * LOG2


def _chisq_psi_prime(theta):
    return special.digamma(theta + 1.0) + LOG2


def _chisq_psi_double_prime(theta):
    return special.polygamma(1, theta + 1.0)


def _lower_bracket(f, b):
    t = np.ones_like(b)
    for _ in range(1100):
        bad = f(-1.0 + t) >= 0
        if not np.any(bad):
            break
        t = np.where(bad, 0.5 * t, t)
    return -1.0 + t


def _chisq_prox(mu, b, x0=None):
    mu = np.broadcast_to(_as_array(mu), np.shape(b))
    f = lambda x: _chisq_psi_prime(x) + mu * x - b
    lo = _lower_bracket(f, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.maximum(np.where(mu > 0, b / mu, 0.0), 0.0) + 1.0
    grow = f(hi) <= 0
    while np.any(grow):
        hi = np.where(grow, 2.0 * hi + 1.0, hi)
        grow = f(hi) <= 0
    start = 0.5 * (lo + hi) if x0 is None else np.where((x0 > lo) & (x0 < hi), x0, 0.5 * (lo + hi))
    return _safeguarded_newton(f, lambda x: _chisq_psi_double_prime(x) + mu, lo, hi, start,
                               _prox_scale(_chisq_psi_prime, mu, b))


def _chisq_link_inverse(t):
    # theta = digamma^{-1}(t - log 2) - 1
    return _chisq_prox(0.0, _as_array(t))


def _chisq_h_score(t):
    return 1.0 - 0.5 * np.exp(t)


def _chisq_h_curvature(t):
    e = 0.5 * np.exp(t)
    return (1.0 - e) ** 2 - e


def _chisq_sample(rng, theta):
    return np.log(rng.chisquare(2.0 * (theta + 1.0)))


FAMILIES: dict[str, Family] = {
    "gaussian": Family(
        name="gaussian",
        psi=lambda t: 0.5 * t * t,
        psi_prime=lambda t: t,
        psi_double_prime=lambda t: np.ones_like(t),
        link_inverse_fn=lambda m: m,
        theta_domain=(-np.inf, np.inf),
        mean_domain=(-np.inf, np.inf),
        sufficient_stat=lambda y: y,
        discrete=False,
        prox_fn=_gauss_prox,
        subexp_fn=lambda t: (np.ones_like(t), np.zeros_like(t)),
        sampler=lambda rng, t: rng.normal(t, 1.0),
        h_score_fn=lambda y: -y,
        h_curvature_fn=lambda y: y * y - 1.0,
        bregman_fn=lambda t0, t1: 0.5 * (t1 - t0) ** 2,
    ),
    "poisson": Family(
        name="poisson",
        psi=np.exp,
        psi_prime=np.exp,
        psi_double_prime=np.exp,
        link_inverse_fn=np.log,
        theta_domain=(-np.inf, np.inf),
        mean_domain=(0.0, np.inf),
        sufficient_stat=lambda y: y,
        discrete=True,
        prox_fn=_pois_prox,
        subexp_fn=lambda t: (2.0 * np.exp(t), np.full_like(t, 0.55)),
        sampler=lambda rng, t: rng.poisson(np.exp(t)).astype(float),
        bregman_fn=_pois_bregman,
    ),
    "exponential": Family(
        name="exponential",
        psi=lambda t: -np.log(-t),
        psi_prime=lambda t: -1.0 / t,
        psi_double_prime=lambda t: 1.0 / (t * t),
        link_inverse_fn=lambda m: -1.0 / m,
        theta_domain=(-np.inf, 0.0),
        mean_domain=(0.0, np.inf),
        sufficient_stat=lambda y: y,
        discrete=False,
        prox_fn=_exp_prox,
        subexp_fn=lambda t: (4.0 / (t * t) * np.log(4.0 / np.e), -2.0 / t),
        sampler=lambda rng, t: rng.exponential(-1.0 / t),
        h_score_fn=lambda y: np.zeros_like(y),
        h_curvature_fn=lambda y: np.zeros_like(y),
        bregman_fn=_exp_bregman,
    ),
    "binomial": Family(
        name="binomial",
        psi=lambda t: np.logaddexp(0.0, t),
        psi_prime=special.expit,
        psi_double_prime=lambda t: special.expit(t) * special.expit(-t),
        link_inverse_fn=_binom_link_inverse,
        theta_domain=(-np.inf, np.inf),
        mean_domain=(0.0, 1.0),
        sufficient_stat=lambda y: y,
        discrete=True,
        prox_fn=_binom_prox,
        subexp_fn=lambda t: (np.full_like(t, 0.25), np.zeros_like(t)),
        sampler=lambda rng, t: rng.binomial(1, special.expit(t)).astype(float),
    ),
    "chisq": Family(
        name="chisq",
        psi=_chisq_psi,
        psi_prime=_chisq_psi_prime,
        psi_double_prime=_chisq_psi_double_prime,
        link_inverse_fn=_chisq_link_inverse,
        theta_domain=(-1.0, np.inf),
        mean_domain=(-np.inf, np.inf),
        sufficient_stat=np.log,
        discrete=False,
        prox_fn=_chisq_prox,
        subexp_fn=lambda t: (8.0 * (t + 1.0), np.full_like(t, 4.0)),
        sampler=_chisq_sample,
        h_score_fn=_chisq_h_score,
        h_curvature_fn=_chisq_h_curvature,
    ),
}


def get_family(family: str | Family) -> Family:
    if isinstance(family, Family):
        return family
    try:
        return FAMILIES[family.lower()]
    except KeyError:
        raise ValueError(f"unknown family {family!r}; choose from {sorted(FAMILIES)}") from None


def psi_bundle(family: str | Family, theta):
    """``(psi, psi', psi'')`` at ``theta``."""
    fam = get_family(family)
    theta = check_theta(fam, theta)
    return fam.psi(theta), fam.psi_prime(theta), fam.psi_double_prime(theta)


def link_inverse(family: str | Family, y, eps: float | None = None):
    """Natural parameter with mean ``y``.

    Values on the mean-domain boundary raise ``DomainError`` unless
    ``eps`` is given, in which case ``y`` is first clamped ``eps`` inside
    the domain.
    """
    fam = get_family(family)
    y = _as_array(y)
    lo, hi = fam.mean_domain
    if eps is not None:
        y = clamp_mean(fam, y, eps)
    if not np.all(np.isfinite(y)) or np.any(y <= lo) or np.any(y >= hi):
        raise DomainError(f"mean value on or outside the {fam.name} mean-domain boundary ({lo}, {hi})")
    return fam.link_inverse_fn(y)


def clamp_mean(family: str | Family, m, eps: float):
    fam = get_family(family)
    lo, hi = fam.mean_domain
    m = _as_array(m)
    if np.isfinite(lo):
        m = np.maximum(m, lo + eps)
    if np.isfinite(hi):
        m = np.minimum(m, hi - eps)
    return m


def initial_theta(family: str | Family, y) -> np.ndarray:
    """Warm-start ``psi'^{-1}(y)`` with boundary data clamped ``1/(4n)`` inside the mean domain."""
    y = _as_array(y)
    return link_inverse(family, y, eps=1.0 / (4.0 * y.size))


def kl_divergence(family: str | Family, theta0, theta1) -> float:
    """``sum_i psi(theta1) - psi(theta0) - (theta1 - theta0) psi'(theta0)``."""
    fam = get_family(family)
    t0 = check_theta(fam, theta0)
    t1 = check_theta(fam, theta1)
    if fam.bregman_fn is not None:
        terms = fam.bregman_fn(t0, t1)
    else:
        terms = fam.psi(t1) - fam.psi(t0) - (t1 - t0) * fam.psi_prime(t0)
    return float(np.sum(terms))


def kl_bar(family: str | Family, theta0, theta1) -> float:
    return kl_divergence(family, theta0, theta1) / np.size(theta0)


def scalar_prox_solve(family: str | Family, mu, b, x0=None) -> np.ndarray:
    """Solve ``psi'(x) + mu * x = b`` elementwise for ``mu > 0``."""
    fam = get_family(family)
    b = _as_array(b)
    if np.any(_as_array(mu) <= 0):
        raise ValueError("mu must be positive")
    scalar = b.ndim == 0
    b = np.atleast_1d(b)
    x = fam.prox_fn(np.asarray(mu, dtype=float), b, None if x0 is None else np.atleast_1d(_as_array(x0)))
    return x[0] if scalar else x


def subexp_params(family: str | Family, theta) -> SubExpParams:
    fam = get_family(family)
    theta = check_theta(fam, theta)
    nu_sq, b = fam.subexp_fn(theta)
    if np.ndim(theta) == 0:
        return SubExpParams(float(nu_sq), float(b))
    return SubExpParams(nu_sq, b)


def h_score(family: str | Family, y):
    """``h'(y) / h(y)`` of the base measure of the natural statistic."""
    fam = get_family(family)
    if fam.h_score_fn is None:
        raise UnsupportedFamilyError(f"{fam.name} is discrete; use PUKL instead of SUKL/GSURE")
    return fam.h_score_fn(_as_array(y))


def h_curvature(family: str | Family, y):
    """``h''(y) / h(y)`` of the base measure, used by GSURE."""
    fam = get_family(family)
    if fam.h_curvature_fn is None:
        raise UnsupportedFamilyError(f"{fam.name} is discrete; GSURE is unavailable")
    return fam.h_curvature_fn(_as_array(y))


def make_rng(seed) -> np.random.Generator:
    """Counter-based (Philox) generator from an int, key tuple or SeedSequence."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    elif isinstance(seed, (tuple, list)):
        ss = np.random.SeedSequence(int(seed[0]), spawn_key=tuple(int(s) for s in seed[1:]))
    else:
        ss = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss))


def sample(family: str | Family, theta, seed) -> np.ndarray:
    """Independent draws of the natural statistic with natural parameters ``theta``."""
    fam = get_family(family)
    theta = check_theta(fam, theta)
    return fam.sampler(make_rng(seed), theta)


def empirical_risk(family: str | Family, theta, y) -> float:
    """``R_n(theta) = mean(psi(theta) - y * theta)``."""
    fam = get_family(family)
    theta = check_theta(fam, theta)
    return float(np.mean(fam.psi(theta) - _as_array(y) * theta))


def population_risk(family: str | Family, theta, beta_star) -> float:
    """``R(theta) = mean(psi(theta) - beta* * theta)``."""
    return empirical_risk(family, theta, beta_star)


def empirical_and_population_risk(family, theta, y, beta_star) -> tuple[float, float]:
    return empirical_risk(family, theta, y), population_risk(family, theta, beta_star)


def theta_box(family: str | Family, K: float) -> tuple[float, float]:
    """Interval ``{theta : psi''(theta) >= 1/K}`` of the constrained parameter set."""
    fam = get_family(family)
    if K <= 0:
        raise ValueError("K must be positive")
    if fam.name == "gaussian":
        if K < 1:
            raise DomainError("gaussian constrained set is empty for K < 1")
        return -np.inf, np.inf
    if fam.name == "poisson":
        return -float(np.log(K)), np.inf
    if fam.name == "exponential":
        return -float(np.sqrt(K)), 0.0
    if fam.name == "binomial":
        if K < 4:
            raise DomainError("binomial constrained set is empty for K < 4")
        p = 0.5 * (1.0 + np.sqrt(1.0 - 4.0 / K))
        t = float(special.logit(p))
        return -t, t
    if fam.name == "chisq":
        # trigamma is decreasing, so the set is (-1, t_K]
        from scipy.optimize import brentq
        g = lambda t: float(special.polygamma(1, t + 1.0)) - 1.0 / K
        hi = 1.0
        while g(hi) > 0:
            hi *= 2.0
        return -1.0, brentq(g, -1.0 + 1e-12, hi, xtol=1e-14)
    raise UnsupportedFamilyError(f"no constrained set for {fam.name}")
