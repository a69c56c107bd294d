import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special, stats

from lattice_tf import expfam as ef
from lattice_tf.exceptions import DomainError, UnsupportedFamilyError
from oracles import bisect

FAMILIES = ("gaussian", "poisson", "exponential", "binomial", "chisq")


def domain_points(name, rng, size):
    if name == "exponential":
        return -np.exp(rng.uniform(-3, 3, size))
    if name == "chisq":
        return -1.0 + np.exp(rng.uniform(-3, 3, size))
    return rng.uniform(-5, 5, size)


# psi bundle --------------------------------------------------------------

def test_psi_bundle_values():
    np.testing.assert_allclose(ef.psi_bundle("poisson", 0.0), (1.0, 1.0, 1.0))
    np.testing.assert_allclose(ef.psi_bundle("exponential", -2.0), (-np.log(2), 0.5, 0.25))
    np.testing.assert_allclose(ef.psi_bundle("gaussian", 3.0), (4.5, 3.0, 1.0))


def test_psi_bundle_domain_error():
    with pytest.raises(DomainError):
        ef.psi_bundle("exponential", 0.0)
    with pytest.raises(DomainError):
        ef.psi_bundle("chisq", -1.5)


def test_unknown_family():
    with pytest.raises(ValueError):
        ef.get_family("cauchy")


@pytest.mark.parametrize("name", FAMILIES)
def test_second_derivative_matches_differences(name, rng):
    fam = ef.get_family(name)
    t = domain_points(name, rng, 100)
    h = 1e-5
    t = np.maximum(t, fam.theta_domain[0] + 10 * h) if np.isfinite(fam.theta_domain[0]) else t
    t = np.minimum(t, fam.theta_domain[1] - 10 * h) if np.isfinite(fam.theta_domain[1]) else t
    fd = (fam.psi_prime(t + h) - fam.psi_prime(t - h)) / (2 * h)
    # relative step keeps the difference away from the domain edge and in the linear regime
    ok = np.abs(t - fam.theta_domain[0]) > 1e-2
    np.testing.assert_allclose(fam.psi_double_prime(t)[ok], fd[ok], rtol=1e-6, atol=1e-10)


@pytest.mark.parametrize("name", FAMILIES)
def test_first_derivative_matches_differences(name, rng):
    fam = ef.get_family(name)
    t = domain_points(name, rng, 50)
    t = t[np.abs(t - fam.theta_domain[0]) > 1e-2]
    h = 1e-6
    fd = (fam.psi(t + h) - fam.psi(t - h)) / (2 * h)
    np.testing.assert_allclose(fam.psi_prime(t), fd, rtol=1e-6, atol=1e-8)


def test_chisq_psi_is_log_gamma():
    t = np.array([-0.5, 0.0, 1.5, 10.0])
    np.testing.assert_allclose(ef.get_family("chisq").psi(t), special.gammaln(t + 1) + (t + 1) * np.log(2), rtol=1e-12)
    np.testing.assert_allclose(ef.get_family("chisq").psi_prime(t), special.digamma(t + 1) + np.log(2), rtol=1e-12)
    np.testing.assert_allclose(ef.get_family("chisq").psi_double_prime(t), special.polygamma(1, t + 1), rtol=1e-12)


# link inverse ------------------------------------------------------------

def test_link_inverse_values():
    assert ef.link_inverse("poisson", np.e) == pytest.approx(1.0, abs=1e-15)
    assert ef.link_inverse("exponential", 2.0) == pytest.approx(-0.5)
    assert ef.link_inverse("binomial", 0.5) == pytest.approx(0.0, abs=1e-15)


def test_link_inverse_boundary():
    with pytest.raises(DomainError):
        ef.link_inverse("poisson", 0.0)
    with pytest.raises(DomainError):
        ef.link_inverse("binomial", 1.0)
    assert ef.link_inverse("poisson", 0.0, eps=0.25) == pytest.approx(np.log(0.25))
    np.testing.assert_allclose(ef.initial_theta("poisson", np.zeros(4)), np.log(1 / 16))


@pytest.mark.parametrize("name", FAMILIES)
def test_link_inverse_round_trip(name, rng):
    fam = ef.get_family(name)
    t = domain_points(name, rng, 30)
    np.testing.assert_allclose(ef.link_inverse(fam, fam.psi_prime(t)), t, rtol=1e-9, atol=1e-9)


# KL divergence -----------------------------------------------------------

def test_kl_identity_and_gaussian(rng):
    t0, t1 = rng.normal(size=10), rng.normal(size=10)
    assert ef.kl_divergence("poisson", t0, t0) == 0.0
    assert ef.kl_divergence("gaussian", t0, t1) == pytest.approx(0.5 * np.sum((t0 - t1) ** 2), rel=1e-14)
    assert ef.kl_bar("gaussian", t0, t1) == pytest.approx(0.05 * np.sum((t0 - t1) ** 2), rel=1e-14)


def test_kl_poisson_scalar():
    # [DERIVED] summation of the KL definition over the Poisson(1) pmf
    k = np.arange(0, 120)
    p0 = stats.poisson.pmf(k, 1.0)
    p1 = stats.poisson.pmf(k, 2.0)
    oracle = float(np.sum(p0 * (np.log(p0) - np.log(p1))))
    assert oracle == pytest.approx(1 - np.log(2), abs=1e-14)
    assert ef.kl_divergence("poisson", [0.0], [np.log(2)]) == pytest.approx(oracle, abs=1e-14)


def test_kl_exponential_quadrature():
    # [DERIVED] numeric quadrature of the density-ratio definition
    t0, t1 = -1.5, -0.4
    log_ratio = lambda y: np.log(-t0) + t0 * y - np.log(-t1) - t1 * y
    f0 = lambda y: -t0 * np.exp(t0 * y)
    oracle, _ = integrate.quad(lambda y: f0(y) * log_ratio(y), 0, np.inf, epsabs=1e-13)
    assert ef.kl_divergence("exponential", [t0], [t1]) == pytest.approx(oracle, abs=1e-10)


@pytest.mark.parametrize("name", FAMILIES)
def test_kl_nonnegative(name, rng):
    fam = ef.get_family(name)
    for _ in range(20):
        t0, t1 = domain_points(name, rng, 5), domain_points(name, rng, 5)
        assert ef.kl_divergence(fam, t0, t1) >= -1e-12
    assert abs(ef.kl_divergence(fam, t0, t0)) <= 1e-12


def test_kl_domain_error():
    with pytest.raises(DomainError):
        ef.kl_divergence("exponential", [-1.0], [1.0])


# scalar prox -------------------------------------------------------------

def test_scalar_prox_closed_forms():
    assert ef.scalar_prox_solve("gaussian", 1.0, 2.0) == pytest.approx(1.0)
    assert ef.scalar_prox_solve("exponential", 1.0, 0.0) == pytest.approx(-1.0)


def test_scalar_prox_poisson_bisection():
    # [DERIVED] bisection oracle to 1e-14
    x = ef.scalar_prox_solve("poisson", 2.0, 5.0)
    ref = bisect(lambda t: np.exp(t) + 2 * t - 5, -5, 5)
    assert abs(np.exp(x) + 2 * x - 5) <= 1e-12 * 6
    assert abs(x - ref) <= 1e-13


@pytest.mark.parametrize("name", FAMILIES)
def test_scalar_prox_residual(name):
    fam = ef.get_family(name)
    rng = np.random.default_rng(7)
    mu = np.exp(rng.uniform(np.log(1e-2), np.log(1e2), 10_000))
    b = rng.uniform(-50, 50, 10_000)
    x = ef.scalar_prox_solve(fam, mu, b)
    lo, hi = fam.theta_domain
    assert np.all(x > lo) and np.all(x < hi)
    res = np.abs(fam.psi_prime(x) + mu * x - b)
    assert np.all(res <= 1e-12 * (1 + np.abs(b)))


@pytest.mark.parametrize("name", FAMILIES)
@given(mu=st.floats(1e-2, 1e2), b1=st.floats(-30, 30), b2=st.floats(-30, 30))
def test_scalar_prox_monotone(name, mu, b1, b2):
    lo, hi = sorted((b1, b2))
    x = ef.scalar_prox_solve(name, np.array([mu, mu]), np.array([lo, hi]))
    assert x[0] <= x[1]


def test_scalar_prox_rejects_nonpositive_mu():
    with pytest.raises(ValueError):
        ef.scalar_prox_solve("poisson", 0.0, 1.0)


# sub-exponential parameters ----------------------------------------------

def test_subexp_table():
    p = ef.subexp_params("poisson", np.log(3))
    assert (p.nu_sq, p.b) == (pytest.approx(6.0), pytest.approx(0.55))
    p = ef.subexp_params("exponential", -1.0)
    assert p.nu_sq == pytest.approx(4 * np.log(4 / np.e))
    assert p.nu_sq == pytest.approx(1.5452, abs=1e-4)
    assert p.b == pytest.approx(2.0)
    # chi-squared with 5 degrees of freedom: theta = k/2 - 1
    p = ef.subexp_params("chisq", 1.5)
    assert (p.nu_sq, p.b) == (pytest.approx(20.0), pytest.approx(4.0))
    p = ef.subexp_params("gaussian", 0.3)
    assert (p.nu_sq, p.b) == (1.0, 0.0)
    p = ef.subexp_params("binomial", 0.3)
    assert (p.nu_sq, p.b) == (0.25, 0.0)


def test_subexp_vector_and_domain():
    p = ef.subexp_params("poisson", np.zeros(3))
    np.testing.assert_allclose(p.nu_sq, 2.0)
    with pytest.raises(DomainError):
        ef.subexp_params("exponential", 1.0)


# h score -----------------------------------------------------------------

def test_h_score_values():
    assert ef.h_score("gaussian", 1.7) == pytest.approx(-1.7)
    assert ef.h_score("exponential", 3.0) == 0.0
    assert ef.h_score("gaussian", 0.0) == 0.0
    for name in ("poisson", "binomial"):
        with pytest.raises(UnsupportedFamilyError):
            ef.h_score(name, 1.0)


def test_chisq_h_score_by_differences():
    # log-statistic base measure h(t) = exp(t - e^t / 2), up to a constant
    log_h = lambda t: t - 0.5 * np.exp(t)
    t = np.linspace(-2, 3, 11)
    step = 1e-5
    fd = (log_h(t + step) - log_h(t - step)) / (2 * step)
    np.testing.assert_allclose(ef.h_score("chisq", t), fd, rtol=1e-8, atol=1e-8)
    h = lambda t: np.exp(log_h(t))
    fd2 = (h(t + 1e-4) - 2 * h(t) + h(t - 1e-4)) / 1e-8 / h(t)
    np.testing.assert_allclose(ef.h_curvature("chisq", t), fd2, rtol=1e-5, atol=1e-5)


# sampling ----------------------------------------------------------------

def test_sample_gaussian_mean():
    y = ef.sample("gaussian", np.zeros(100_000), seed=1)
    assert abs(y.mean()) <= 0.02


def test_sample_poisson_variance():
    y = ef.sample("poisson", np.full(100_000, np.log(4)), seed=2)
    assert abs(y.var() - 4) <= 0.2
    assert np.all(y == np.round(y))


def test_sample_exponential_mgf():
    # [DERIVED] Monte-Carlo vs exp{psi(theta+s) - psi(theta) - s psi'(theta)} for the centered statistic
    theta, s = -1.0, 0.3
    y = ef.sample("exponential", np.full(200_000, theta), seed=3)
    vals = np.exp(s * (y - 1.0))
    fam = ef.get_family("exponential")
    target = np.exp(fam.psi(theta + s) - fam.psi(theta) - s * fam.psi_prime(theta))
    assert target == pytest.approx(np.exp(-0.3) / 0.7)
    se = vals.std() / np.sqrt(vals.size)
    assert abs(vals.mean() - target) <= 3 * se


def test_sample_chisq_mean():
    theta = np.full(100_000, 1.5)
    t = ef.sample("chisq", theta, seed=4)
    assert abs(t.mean() - ef.get_family("chisq").psi_prime(1.5)) <= 0.02


def test_sample_deterministic_and_keyed():
    th = np.zeros(50)
    np.testing.assert_array_equal(ef.sample("poisson", th, seed=(1, 2, 3)), ef.sample("poisson", th, seed=(1, 2, 3)))
    assert not np.array_equal(ef.sample("poisson", th, seed=(1, 2, 3)), ef.sample("poisson", th, seed=(1, 2, 4)))
    with pytest.raises(DomainError):
        ef.sample("exponential", np.ones(3), seed=0)


# risks -------------------------------------------------------------------

@pytest.mark.parametrize("name", FAMILIES)
def test_population_risk_minimized_at_truth(name, rng):
    fam = ef.get_family(name)
    ts = domain_points(name, rng, 20)
    beta = fam.psi_prime(ts)
    r_star = ef.population_risk(fam, ts, beta)
    for _ in range(10):
        t = domain_points(name, rng, 20)
        r = ef.population_risk(fam, t, beta)
        assert r_star <= r + 1e-12
        assert ef.kl_bar(fam, ts, t) == pytest.approx(r - r_star, abs=1e-12 * (1 + abs(r)))


def test_degenerate_poisson_empirical_risk():
    y = np.zeros(10)
    vals = [ef.empirical_risk("poisson", np.full(10, c), y) for c in (-1, -5, -10, -30)]
    assert np.all(np.diff(vals) < 0)
    assert vals[-1] <= 1e-12
    rn, r = ef.empirical_and_population_risk("poisson", np.full(10, -30.0), y, np.full(10, 1e-4))
    assert rn < r


# constrained sets --------------------------------------------------------

@pytest.mark.parametrize("name, K", [("poisson", 4.0), ("exponential", 9.0), ("binomial", 5.0), ("chisq", 3.0)])
def test_theta_box_curvature(name, K):
    fam = ef.get_family(name)
    lo, hi = ef.theta_box(fam, K)
    inner = np.linspace(max(lo, -50), min(hi, 50), 200)[1:-1]
    assert np.all(fam.psi_double_prime(inner) >= 1 / K - 1e-12)
    for edge in (lo, hi):
        if np.isfinite(edge) and fam.theta_domain[0] < edge < fam.theta_domain[1]:
            assert fam.psi_double_prime(np.array(edge)) == pytest.approx(1 / K, rel=1e-9)


def test_theta_box_empty():
    with pytest.raises(DomainError):
        ef.theta_box("gaussian", 0.5)
    with pytest.raises(DomainError):
        ef.theta_box("binomial", 3.0)
