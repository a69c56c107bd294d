import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lattice_tf import expfam as ef
from lattice_tf import lattice as lt
from lattice_tf import risk as rk
from lattice_tf import solver as sv
from lattice_tf.exceptions import CriterionMismatchError, DomainError, UnsupportedFamilyError
from oracles import central_differences


def problem(dims, k=0):
    spec = lt.LatticeSpec(tuple(dims), (k,) * len(dims))
    return spec, lt.build_diff_lattice(spec), lt.polynomial_null_basis(spec)


def pieces(n, levels):
    return np.repeat(levels, n // len(levels))


# active sets -------------------------------------------------------------

def test_active_rows_constant():
    _, D, basis = problem((10,))
    act = rk.active_rows(D, np.full(10, 2.0), basis=basis)
    assert act.kept_rows.size == 9 and act.dim == 1


def test_active_rows_three_pieces():
    _, D, basis = problem((12,))
    act = rk.active_rows(D, pieces(12, [0.0, 1.0, -2.0]), basis=basis)
    assert act.dim == 3
    P = act.null_projector
    np.testing.assert_allclose(P @ P, P, atol=1e-10)
    np.testing.assert_allclose(P, P.T, atol=1e-10)
    # null(D_breve) contains null(D)
    np.testing.assert_allclose(P @ basis.Q, basis.Q, atol=1e-10)
    np.testing.assert_allclose(act.D_breve.toarray() @ act.null_basis, 0.0, atol=1e-12)


def test_active_rows_unpenalized(rng):
    _, D, basis = problem((4, 5), 1)
    y = rng.normal(size=20)
    act = rk.active_rows(D, y, basis=basis)
    assert act.kept_rows.size == 0
    np.testing.assert_allclose(act.null_projector, np.eye(20), atol=1e-10)
    with pytest.raises(ValueError):
        rk.active_rows(D, y, active_tol=0.0)


# divergence --------------------------------------------------------------

def test_gaussian_divergence_is_dimension(rng):
    spec, D, basis = problem((6, 6), 0)
    y = rng.normal(size=36) + np.repeat([0, 3], 18)
    fit = sv.fit_mean_tf(y, D, sv.FitConfig(lambda1=0.02), basis=basis)
    act = rk.active_rows(D, fit.theta_hat, fit=fit, basis=basis)
    assert abs(rk.divergence_trace("gaussian", fit.theta_hat, act) - act.dim) <= 1e-9


def _dense_trace(w, U, Q=None, lam2n=0.0, c=None):
    # [DERIVED] direct dense evaluation of the active-face formula
    n = w.size
    P = U @ U.T
    if Q is not None and c is not None:
        nc = np.linalg.norm(c)
        e = Q @ (c / nc)
        H = P @ np.diag(w) @ P + (lam2n / nc) * P @ (Q @ Q.T - np.outer(e, e)) @ P
    else:
        H = P @ np.diag(w) @ P
    wv, V = np.linalg.eigh(H)
    keep = wv > 1e-10 * wv.max()
    Hp = (V[:, keep] / wv[keep]) @ V[:, keep].T
    return float(np.trace(np.diag(w) @ P @ Hp @ P))


def test_divergence_dense_oracle_and_kink(rng):
    n = 20
    _, D, basis = problem((n,))
    theta = np.log(3.0) + pieces(n, [0.0, 0.5, -0.3, 0.2])
    act = rk.active_rows(D, theta, basis=basis)
    w = np.exp(theta)
    assert rk.divergence_trace("poisson", theta, act) == pytest.approx(_dense_trace(w, act.null_basis), rel=1e-10)
    c = basis.Q.T @ theta
    for lam2 in (0.1, 10.0):
        got = rk.divergence_trace("poisson", theta, act, lam2, basis)
        assert got == pytest.approx(_dense_trace(w, act.null_basis, basis.Q, n * lam2, c), rel=1e-9)
    # at the kink the null-space directions are removed: trace of the complement block
    theta0 = theta - basis.project(theta)
    U = act.null_basis
    Uc = U - basis.Q @ (basis.Q.T @ U)
    u_, s_, _ = np.linalg.svd(Uc, full_matrices=False)
    Uc = u_[:, s_ > 1e-8]
    expected = _dense_trace(np.exp(theta0), Uc)
    assert rk.divergence_trace("poisson", theta0, act, 1e6, basis) == pytest.approx(expected, rel=1e-9)
    assert rk.divergence_trace("poisson", theta0, act, 0.0, basis) > expected + 0.5


@pytest.mark.parametrize("dims", [(30,), (5, 6)])
def test_block_fast_path_matches_dense(dims, rng):
    # disjoint-block faces take a diagonal shortcut; the dense route is the oracle
    _, D, basis = problem(dims)
    n = int(np.prod(dims))
    theta = np.log(2.0) + np.round(rng.normal(size=n))
    act = rk.active_rows(D, theta, basis=basis)
    assert act.labels is not None
    dense = rk.ActiveSet(act.kept_rows, act.D_breve, act.null_basis.copy())
    assert dense.dim == act.dim
    for target in ("beta", "theta"):
        assert rk.divergence_trace("poisson", theta, act, target=target) == pytest.approx(
            rk.divergence_trace("poisson", theta, dense, target=target), rel=1e-12)
        np.testing.assert_allclose(rk.jacobian_diagonal("poisson", theta, act, target=target),
                                   rk.jacobian_diagonal("poisson", theta, dense, target=target), rtol=1e-12)
    assert rk.divergence_trace("gaussian", theta, dense) == act.dim


def test_divergence_theta_target(rng):
    n = 20
    _, D, basis = problem((n,))
    theta = -1.0 + pieces(n, [0.0, 0.5, -0.3, 0.2])
    act = rk.active_rows(D, theta, basis=basis)
    w = 1.0 / theta ** 2
    U = act.null_basis
    expected = np.trace(U @ np.linalg.pinv(U.T @ (w[:, None] * U)) @ U.T)
    assert rk.divergence_trace("exponential", theta, act, target="theta") == pytest.approx(expected, rel=1e-10)
    jt = rk.jacobian_diagonal("exponential", theta, act)
    jb = rk.jacobian_diagonal("exponential", theta, act, target="beta")
    assert jt.sum() == pytest.approx(expected, rel=1e-10)
    assert jb.sum() == pytest.approx(rk.divergence_trace("exponential", theta, act), rel=1e-10)
    with pytest.raises(ValueError):
        rk.divergence_trace("exponential", theta, act, target="mean")


def test_poisson_divergence_matches_differences():
    # [DERIVED] central finite differences of re-solved fits
    rng = np.random.default_rng(4)
    n = 30
    _, D, basis = problem((n,))
    theta = np.log(8.0) + pieces(n, [0.0, 0.6, -0.4])
    y = rng.poisson(np.exp(theta)).astype(float) + rng.uniform(0, 0.5, n)
    cfg = sv.FitConfig(lambda1=0.02, tol_abs=1e-12, tol_rel=1e-12)
    fit = sv.fit_mle_tf(y, "poisson", D, basis, cfg)
    act = rk.active_rows(D, fit.theta_hat, fit=fit, basis=basis)
    refit = rk.make_refit("poisson", D, basis, cfg, warm=fit, tol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error", rk.BoundaryWarning)
        fd = rk.numeric_divergence(refit, y, eps=1e-5, D=D)
    assert rk.divergence_trace("poisson", fit.theta_hat, act) == pytest.approx(fd, rel=1e-3)


def test_jacobian_diagonal_matches_differences():
    rng = np.random.default_rng(9)
    n = 24
    _, D, basis = problem((n,), 1)
    theta = -0.8 + 0.3 * np.linspace(-1, 1, n) ** 2
    y = ef.sample("exponential", theta, 5)
    cfg = sv.FitConfig(lambda1=0.01, lambda2=0.01, tol_abs=1e-12, tol_rel=1e-12)
    fit = sv.fit_mle_tf(y, "exponential", D, basis, cfg)
    act = rk.active_rows(D, fit.theta_hat, fit=fit, basis=basis)
    refit = rk.make_refit("exponential", D, basis, cfg, warm=fit, tol=1e-12)
    J = central_differences(lambda v: refit(v).theta_hat, y, 1e-6)
    np.testing.assert_allclose(rk.jacobian_diagonal("exponential", fit.theta_hat, act, 0.01, basis),
                               np.diag(J), rtol=1e-3, atol=1e-6)


def test_numeric_divergence_linear_smoothers(rng):
    y = rng.normal(size=15)
    H = rng.normal(size=(15, 15))
    assert rk.numeric_divergence(lambda v: H @ v, y) == pytest.approx(np.trace(H), rel=1e-8)
    assert rk.numeric_divergence(lambda v: v, y) == pytest.approx(15.0, rel=1e-10)


def test_numeric_divergence_boundary_warning():
    n = 10
    _, D, basis = problem((n,))
    y = np.zeros(n)
    y[5:] = 1.0
    # two blocks of 5 move n lam / 5 each and fuse exactly at n lam = 2.5
    cfg = sv.FitConfig(lambda1=0.25, tol_abs=1e-12, tol_rel=1e-12)
    refit = rk.make_refit("gaussian", D, basis, cfg, estimator="mean")
    with pytest.warns(rk.BoundaryWarning):
        rk.numeric_divergence(refit, y, eps=1e-3, D=D)


# criteria ----------------------------------------------------------------

def test_sure_examples(rng):
    y = rng.normal(size=12)
    s2 = 0.7
    assert rk.sure(y, y, 12, s2) == pytest.approx(12 * s2)
    assert rk.sure(y, np.zeros(12), 0, s2) == pytest.approx(y @ y - 12 * s2)
    m = np.full(12, y.mean())
    assert rk.sure(y, m, 1, s2) == pytest.approx(np.sum((y - y.mean()) ** 2) - 12 * s2 + 2 * s2)
    with pytest.raises(ValueError):
        rk.sure(y, y, 1, 0.0)


def test_sukl_examples(rng):
    y = rng.exponential(size=8)
    beta = rng.exponential(size=8)
    assert rk.sukl(y, -np.ones(8), beta, 2.5, "exponential") == pytest.approx(-beta.sum() + 2.5)
    with pytest.raises(UnsupportedFamilyError):
        rk.sukl(y, np.zeros(8), beta, 0.0, "poisson")


def test_sukl_gaussian_reduction():
    # [DERIVED] algebraic reduction, checked on random instances
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(5, 40))
        y = rng.normal(size=n) * 3
        th = rng.normal(size=n)
        div = float(rng.uniform(0, n))
        lhs = rk.sukl(y, th, th, div, "gaussian")
        assert lhs == pytest.approx(0.5 * (np.sum((y - th) ** 2) - y @ y) + div, abs=1e-8)
        th2 = rng.normal(size=n)
        div2 = float(rng.uniform(0, n))
        d_sukl = lhs - rk.sukl(y, th2, th2, div2, "gaussian")
        d_sure = rk.sure(y, th, div, 1.0) - rk.sure(y, th2, div2, 1.0)
        assert d_sukl == pytest.approx(0.5 * d_sure, abs=1e-8)


def test_sukl_monte_carlo_unbiased():
    # [DERIVED] Monte-Carlo oracle over 500 replications
    n, reps = 50, 500
    spec, D, basis = problem((n,))
    theta_star = pieces(n, [0.0, 2.0])
    cfg = sv.FitConfig(lambda1=0.02, method="auto")
    diffs = []
    for r in range(reps):
        y = ef.sample("gaussian", theta_star, (17, r))
        fit = sv.fit_mean_tf(y, D, cfg, basis)
        act = rk.active_rows(D, fit.theta_hat, fit=fit, basis=basis)
        div = rk.divergence_trace("gaussian", fit.theta_hat, act)
        s = rk.sukl(y, fit.theta_hat, fit.beta_hat, div, "gaussian")
        target = ef.kl_divergence("gaussian", fit.theta_hat, theta_star) - np.sum(0.5 * theta_star ** 2)
        diffs.append(s - target)
    diffs = np.array(diffs)
    assert abs(diffs.mean()) <= 3 * diffs.std(ddof=1) / np.sqrt(reps)


def test_gsure_gaussian_is_sure(rng):
    y = rng.normal(size=10)
    th = rng.normal(size=10)
    assert rk.gsure(y, th, 3.0, "gaussian") == pytest.approx(rk.sure(y, th, 3.0, 1.0), abs=1e-10)


def test_ekl_formula(rng):
    y = rng.exponential(size=6)
    th = -rng.uniform(0.5, 2, 6)
    J = rng.uniform(0, 1, 6)
    expected = np.sum(-np.log(-th)) - y @ th + 0.5 * np.sum(y * y * J)
    assert rk.ekl(y, th, J, "exponential") == pytest.approx(expected)
    with pytest.raises(UnsupportedFamilyError):
        rk.ekl(y, th, J, "gaussian")


def test_ekl_unbiased_for_linear_estimator():
    # exact when theta_hat is affine in y: theta_hat = a + H y with H diagonal-free averaging
    rng = np.random.default_rng(1)
    n, reps = 8, 20000
    beta_star = rng.uniform(0.5, 2.0, n)
    H = np.full((n, n), 0.02) + 0.05 * np.eye(n)
    a = -3.0 * np.ones(n)
    est, target = [], []
    for _ in range(reps):
        y = rng.exponential(beta_star)
        th = a + H @ y
        if np.any(th >= 0):
            continue
        est.append(rk.ekl(y, th, np.diag(H), "exponential"))
        th_star = -1 / beta_star
        target.append(ef.kl_divergence("exponential", th_star, th) + np.sum(-np.log(-th_star) - th_star * beta_star))
    est, target = np.array(est), np.array(target)
    d = est - target
    assert len(d) > 0.99 * reps
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(d.size) + 1e-3


def test_pukl_examples():
    _, D, basis = problem((5,))
    refit = rk.make_refit("poisson", D, basis, sv.FitConfig(lambda1=0.1))
    fit = refit(np.zeros(5) + 1e-300)
    y = np.zeros(5)
    assert rk.pukl(y, refit, fit=fit) == pytest.approx(np.abs(fit.beta_hat).sum())
    # single vertex, no penalty: beta(y) = y
    ident = lambda v: sv.FitResult(np.log(v), v, np.zeros(0), np.zeros(0), 0, [], [], [], True, 0, 0, 1, "poisson")
    for y1 in (2.0, 5.0):
        assert rk.pukl(np.array([y1]), ident) == pytest.approx(y1 - y1 * np.log(y1 - 1))
    with pytest.raises(DomainError):
        rk.pukl(np.array([1.5]), ident)


def test_pukl_monte_carlo():
    # [DERIVED] Monte-Carlo oracle: PUKL tracks KL(theta* || theta_hat) up to a theta_hat-free constant
    n, reps = 60, 500
    _, D, basis = problem((n,))
    theta_star = np.log(4.0) + pieces(n, [0.5, -0.5])
    beta_star = np.exp(theta_star)
    const = np.sum(beta_star - theta_star * beta_star)
    cfg = sv.FitConfig(lambda1=0.01)
    diffs = []
    for r in range(reps):
        y = ef.sample("poisson", theta_star, (23, r))
        fit = sv.fit_mle_tf(y, "poisson", D, basis, cfg)
        p = rk.pukl(y, rk.make_refit("poisson", D, basis, cfg, warm=fit, tol=None), fit=fit)
        diffs.append(p - ef.kl_divergence("poisson", theta_star, fit.theta_hat) - const)
    diffs = np.array(diffs)
    assert abs(diffs.mean()) <= 3 * diffs.std(ddof=1) / np.sqrt(reps)


def test_pukl_subsample_labelled(rng):
    n = 40
    _, D, basis = problem((n,))
    y = rng.poisson(5, n).astype(float)
    rep = rk.tune(y, "poisson", D, basis, [0.01, 0.02], criterion="pukl", pukl_subsample=10)
    assert rep.approximate
    rep = rk.tune(y, "poisson", D, basis, [0.01, 0.02], criterion="pukl")
    assert not rep.approximate


# theory lambda -----------------------------------------------------------

def test_theory_lambda_examples():
    spec = lt.LatticeSpec((64,), (0,))
    assert rk.theory_lambda(spec, 0.0, 0.0) == (0.0, 0.0)
    a = rk.theory_lambda(spec, 0.7, 0.3, t=1.0)
    b = rk.theory_lambda(spec, 0.7, 0.3, t=2.0)
    assert b[0] == pytest.approx(2 * a[0], rel=1e-14) and b[1] == pytest.approx(2 * a[1], rel=1e-14)
    # [DERIVED] homoskedastic arithmetic from the L_Jp values
    om, n = 0.5, 64
    L1, L2 = lt.L_Jp(spec, None, 1.0), lt.L_Jp(spec, None, 2.0)
    B = 2 * om * max(min(L2, np.sqrt(n) * L1), L1)
    l1, l2 = rk.theory_lambda(spec, om, om)
    assert l1 == pytest.approx(2 * B / n, rel=1e-12)
    assert l2 == pytest.approx(2 * 2 * np.sqrt(1 / n) * np.sqrt(n) * om / n, rel=1e-12)
    assert rk.theory_lambda(spec, om, om, mode="mean") == (pytest.approx(B / n), 0.0)


@given(nu=st.lists(st.floats(0, 5), min_size=10, max_size=10),
       b=st.lists(st.floats(0, 5), min_size=10, max_size=10),
       idx=st.integers(0, 9), bump=st.floats(0, 3))
def test_theory_lambda_monotone(nu, b, idx, bump):
    spec = lt.LatticeSpec((10,), (1,))
    nu, b = np.array(nu), np.array(b)
    base = rk.theory_lambda(spec, nu, b)
    for arr in (nu, b):
        arr2 = arr.copy()
        arr2[idx] += bump
        up = rk.theory_lambda(spec, arr2 if arr is nu else nu, arr2 if arr is b else b)
        assert up[0] >= base[0] - 1e-12 and up[1] >= base[1] - 1e-12


def test_sigma_estimate(rng):
    y = 2.0 * rng.normal(size=5000) + np.repeat([0, 5], 2500)
    assert rk.estimate_sigma_sq(y) == pytest.approx(4.0, rel=0.08)


# tuning ------------------------------------------------------------------

def test_check_criterion():
    rk.check_criterion("sure", "gaussian")
    rk.check_criterion("pukl", "poisson")
    rk.check_criterion("sukl", "exponential")
    rk.check_criterion("ekl", "exponential")
    rk.check_criterion("sure", "poisson", estimator="mean")
    rk.check_criterion("sure", "poisson", allow_heuristic=True)
    with pytest.raises(CriterionMismatchError, match="PUKL"):
        rk.check_criterion("sure", "poisson")
    with pytest.raises(CriterionMismatchError, match="PUKL"):
        rk.check_criterion("sukl", "poisson")
    for crit, fam in (("pukl", "gaussian"), ("ekl", "poisson"), ("gsure", "binomial"), ("cv", "gaussian")):
        with pytest.raises(CriterionMismatchError):
            rk.check_criterion(crit, fam)


def test_tune_single_point_and_report(rng):
    n = 30
    _, D, basis = problem((n,))
    y = rng.normal(size=n)
    rep = rk.tune(y, "gaussian", D, basis, [0.05], criterion="sure")
    assert rep.selected == 0 and rep.selected_lambda == (0.05, 0.0)
    grid = np.geomspace(1e-3, 1, 20)[::-1]
    rep = rk.tune(y, "gaussian", D, basis, grid, criterion="sure")
    assert [v[0] for v in rep.values] == list(grid)
    risks = [v[2] for v in rep.values]
    assert rep.selected == int(np.argmin(risks))
    d = json.loads(rep.to_json())
    assert d["schema_version"] and len(d["values"]) == 20
    assert d["selected_lambda1"] == rep.values[rep.selected][0]


def test_report_serializes_infinite_risk():
    rep = rk.RiskReport("sukl", [(0.1, 0.0, float("inf"), 1.0), (0.2, 0.0, 1.0, 1.0)], 1,
                        df_sensitivity=[(1.0, 1.0)] * 2, converged=[True, True])
    assert json.loads(rep.to_json())["values"][0]["risk"] is None


def test_tune_lambda2_grid(rng):
    n = 30
    _, D, basis = problem((n,), 1)
    y = ef.sample("exponential", np.full(n, -1.0), 3)
    rep = rk.tune(y, "exponential", D, basis, [0.01, 0.1], [0.0, 0.05], criterion="ekl")
    assert len(rep.values) == 4 and rep.approximate
    assert [(v[0], v[1]) for v in rep.values] == [(0.01, 0.0), (0.1, 0.0), (0.01, 0.05), (0.1, 0.05)]


def test_sure_tuning_quality():
    # [DERIVED] oracle = true MSE over the grid, median over 20 replications
    n = 100
    spec, D, basis = problem((n,))
    theta_star = pieces(n, [0.0, 2.0, -1.0, 1.0])
    grid = np.geomspace(1e-4, 1e-1, 20)
    ratios = []
    cfg = sv.FitConfig(method="auto")
    for r in range(20):
        y = ef.sample("gaussian", theta_star, (31, r))
        rep = rk.tune(y, "gaussian", D, basis, grid, criterion="sure", sigma_sq=1.0, config=cfg)
        mse = np.array([np.mean((f.beta_hat - theta_star) ** 2) for f in rep.fits])
        ratios.append(mse[rep.selected] / mse.min())
    assert np.median(ratios) <= 1.10
