"""Synthetic signals and the scenario runner for comparing the two trend filters.

A scenario fixes a family, whether the mean or the natural parameter is the
smooth signal, and a grid of chain lengths. Every (n, replication) cell
draws data from its own counter-based stream, fits both estimators with
risk-tuned penalties and records the error against the truth.
"""

from __future__ import annotations

import csv
import io
import json
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .expfam import empirical_risk, get_family, kl_bar, link_inverse, make_rng, population_risk, sample
from .lattice import LatticeSpec, build_diff_lattice, polynomial_null_basis
from .risk import tune
from .solver import FitConfig, fit_mle_tf, lambda1_max

SCHEMA_VERSION = 1


def default_n_grid() -> list[int]:
    """20 log-spaced sizes from 20 to 1000, rounded and deduplicated."""
    return sorted(set(int(round(v)) for v in np.exp(np.linspace(np.log(20), np.log(1000), 20))))


def _grid_points(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def vshape_signal(n: int) -> np.ndarray:
    """``f_n(x) = 1/n + (1 - 2/n) |x - 1/2|`` at ``x_i = (i - 1)/(n - 1)``."""
    if n < 3:
        raise ValueError("need n >= 3")
    x = _grid_points(n)
    return 1.0 / n + (1.0 - 2.0 / n) * np.abs(x - 0.5)


def poisson_shift_signal(n: int) -> np.ndarray:
    """``g_n(x) = 0.5 - f_n(x) + log n``."""
    return 0.5 - vshape_signal(n) + np.log(n)


_SIGNALS = {"vshape": vshape_signal, "poisson_shift": poisson_shift_signal}


@dataclass(frozen=True)
class Scenario:
    """One simulation design. ``grid_size`` and ``grid_ratio`` set the log-spaced
    ``lambda1`` grid ``lambda1_max * [grid_ratio, 1]`` used for tuning.
    Per-vertex estimates are kept for the sizes in ``estimate_n``."""

    family: str
    smooth_target: str
    signal: str
    n_grid: tuple[int, ...] = field(default_factory=lambda: tuple(default_n_grid()))
    replications: int = 10
    k: int = 1
    seed: int = 0
    name: str = "custom"
    grid_size: int = 20
    grid_ratio: float = 1e-4
    pukl_subsample: int | None = 50
    estimate_n: tuple[int, ...] = ()
    max_iter: int = 5000

    def __post_init__(self):
        get_family(self.family)
        if self.smooth_target not in ("mean", "natural"):
            raise ValueError("smooth_target must be 'mean' or 'natural'")
        if self.signal not in _SIGNALS:
            raise ValueError(f"signal must be one of {sorted(_SIGNALS)}")
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        object.__setattr__(self, "estimate_n", tuple(int(n) for n in self.estimate_n))
        if not self.n_grid or min(self.n_grid) < 20:
            raise ValueError("n_grid entries must be >= 20")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.grid_size < 1 or not 0 < self.grid_ratio <= 1:
            raise ValueError("need grid_size >= 1 and 0 < grid_ratio <= 1")

    @property
    def metric(self) -> str:
        return "mse" if self.smooth_target == "mean" else "klbar"

    @property
    def criterion(self) -> str:
        fam = get_family(self.family).name
        if fam == "poisson":
            return "pukl"
        if fam == "exponential" and self.smooth_target == "natural":
            return "ekl"
        if fam == "gaussian" or self.smooth_target == "mean":
            return "sure"
        return "sukl"


PRESETS = {
    "fig2-exp-mean": Scenario("exponential", "mean", "vshape", name="fig2-exp-mean"),
    "fig2-exp-natural": Scenario("exponential", "natural", "vshape", name="fig2-exp-natural"),
    "fig2-pois-mean": Scenario("poisson", "mean", "poisson_shift", name="fig2-pois-mean"),
    "fig2-pois-natural": Scenario("poisson", "natural", "poisson_shift", name="fig2-pois-natural",
                                  estimate_n=(104,)),
}


def truth(sc: Scenario, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``(theta*, beta*)`` for a scenario at size ``n``.

    Natural-smooth scenarios set ``theta* = s`` (``-s`` for the exponential,
    whose natural parameter is negative); mean-smooth ones set ``beta* = s``.
    """
    fam = get_family(sc.family)
    s = _SIGNALS[sc.signal](n)
    if sc.smooth_target == "natural":
        theta = -s if fam.name == "exponential" else s
        return theta, fam.psi_prime(theta)
    return link_inverse(fam, s), s


@dataclass
class ResultRow:
    n: int
    replication: int
    estimator: str
    error_metric: str
    value: float
    selected_lambda: float
    runtime_seconds: float
    status: str = "ok"


@dataclass
class ScenarioResult:
    scenario: Scenario
    rows: list[ResultRow]
    estimates: list[tuple] = field(default_factory=list)

    COLUMNS = ("n", "replication", "estimator", "error_metric", "value", "selected_lambda",
               "runtime_seconds", "status")

    def to_csv(self, path=None, include_runtime: bool = True) -> str:
        """CSV text (written to ``path`` if given). Floats use shortest round-trip repr.

        Without runtimes the output is byte-identical across runs with equal seeds.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            rt = repr(float(r.runtime_seconds)) if include_runtime else ""
            w.writerow([r.n, r.replication, r.estimator, r.error_metric, repr(float(r.value)),
                        repr(float(r.selected_lambda)), rt, r.status])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def estimates_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("n", "replication", "estimator", "index", "x", "truth", "estimate"))
        for row in self.estimates:
            w.writerow([row[0], row[1], row[2], row[3], repr(float(row[4])), repr(float(row[5])),
                        repr(float(row[6]))])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def manifest(self) -> dict:
        from . import __version__
        sc = asdict(self.scenario)
        sc["n_grid"] = list(sc["n_grid"])
        sc["estimate_n"] = list(sc["estimate_n"])
        return {"schema_version": SCHEMA_VERSION, "scenario": sc, "seed": self.scenario.seed,
                "criterion": self.scenario.criterion, "metric": self.scenario.metric,
                "software_version": __version__}

    def medians(self) -> dict[tuple[int, str], float]:
        out = {}
        for n in sorted({r.n for r in self.rows}):
            for est in ("mle_tf", "mean_tf"):
                v = [r.value for r in self.rows if r.n == n and r.estimator == est and r.status == "ok"]
                out[(n, est)] = float(np.median(v)) if v else float("nan")
        return out


def cell_rng_key(sc: Scenario, n: int, rep: int) -> tuple[int, ...]:
    """Stream key ``(seed, scenario, n, rep)``; adding cells never moves existing ones."""
    tag = zlib.crc32(f"{sc.family}/{sc.smooth_target}/{sc.signal}/{sc.k}".encode())
    return (int(sc.seed), tag, int(n), int(rep))


def _error(sc: Scenario, fam, theta_star, beta_star, theta_hat, beta_hat) -> float:
    if sc.metric == "mse":
        return float(np.mean((beta_hat - beta_star) ** 2))
    return kl_bar(fam, theta_star, theta_hat)


def run_cell(sc: Scenario, n: int, rep: int) -> tuple[list[ResultRow], list[tuple]]:
    """Both estimators on one replication at size ``n``."""
    fam = get_family(sc.family)
    spec = LatticeSpec.chain(n, sc.k)
    D = build_diff_lattice(spec)
    basis = polynomial_null_basis(spec)
    theta_star, beta_star = truth(sc, n)
    y = sample(fam, theta_star, make_rng(cell_rng_key(sc, n, rep)))
    cfg = FitConfig(max_iter=sc.max_iter, method="auto")
    x = _grid_points(n)
    rows, est_rows = [], []
    for est in ("mle_tf", "mean_tf"):
        t0 = time.perf_counter()
        mode = "mle" if est == "mle_tf" else "mean"
        try:
            top = lambda1_max(y, fam if mode == "mle" else "gaussian", D, basis)
            grid = top * np.geomspace(sc.grid_ratio, 1.0, sc.grid_size) if top > 0 else np.array([0.0])
            rep_ = tune(y, fam, D, basis, grid, (0.0,), sc.criterion, cfg, estimator=mode,
                        pukl_subsample=sc.pukl_subsample, seed=cell_rng_key(sc, n, rep),
                        allow_heuristic=True)
            fit = rep_.fits[rep_.selected]
            if mode == "mle":
                theta_hat, beta_hat = fit.theta_hat, fit.beta_hat
            else:
                beta_hat = fit.beta_hat
                theta_hat = link_inverse(fam, beta_hat, eps=1.0 / (4.0 * n))
            value = _error(sc, fam, theta_star, beta_star, theta_hat, beta_hat)
            status = "ok" if fit.converged else "not_converged"
            lam = rep_.selected_lambda[0]
            if n in sc.estimate_n:
                target = beta_star if sc.metric == "mse" else theta_star
                estimate = beta_hat if sc.metric == "mse" else theta_hat
                est_rows += [(n, rep, est, i, x[i], target[i], estimate[i]) for i in range(n)]
        except Exception as exc:  # recorded per cell, never fatal
            value, lam, status = float("nan"), float("nan"), f"error: {type(exc).__name__}: {exc}"
        rows.append(ResultRow(n, rep, est, sc.metric, value, float(lam), time.perf_counter() - t0, status))
    return rows, est_rows


def run_scenario(sc: Scenario, workers: int = 1) -> ScenarioResult:
    """All cells of a scenario, in (n, replication, estimator) order."""
    cells = [(n, rep) for n in sc.n_grid for rep in range(sc.replications)]
    with ThreadPoolExecutor(max_workers=max(1, int(workers))) as pool:
        out = list(pool.map(lambda c: run_cell(sc, *c), cells))
    rows = [r for rs, _ in out for r in rs]
    est = [e for _, es in out for e in es]
    return ScenarioResult(sc, rows, est)


# degenerate poisson ---------------------------------------------------------

@dataclass
class DegenerateBranch:
    lambda2: float
    iterations: int
    converged: bool
    diverged: bool
    theta_sup_trace: list[float]
    empirical_risk_trace: list[float]
    population_risk_trace: list[float]
    empirical_risk: float
    population_risk: float
    null_norm: float


@dataclass
class DegenerateReport:
    n: int
    theta_star: float
    curvature_at_truth: float
    branches: list[DegenerateBranch]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "n": self.n, "theta_star": self.theta_star,
                "curvature_at_truth": self.curvature_at_truth,
                "branches": [asdict(b) for b in self.branches]}

    def rows_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("lambda2", "iteration", "theta_sup", "empirical_risk", "population_risk"))
        for b in self.branches:
            for i, vals in enumerate(zip(b.theta_sup_trace, b.empirical_risk_trace, b.population_risk_trace),
                                     start=1):
                w.writerow([repr(b.lambda2), i] + [repr(float(v)) for v in vals])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def degenerate_poisson_demo(n: int = 100, lambda2: float = 0.5, lambda1: float = 0.1, k: int = 0,
                            max_iter: int = 5000, bound: float = 50.0) -> DegenerateReport:
    """All-zero Poisson counts with truth ``theta* = -2 log n``.

    Without the null-space penalty the empirical risk keeps decreasing along
    the constant direction, so the fit runs off to ``-inf`` while the
    population risk grows. That branch runs with floor tolerances and step
    adaptation until ``||theta||_inf`` passes ``bound`` or the budget ends;
    with ``lambda2 > 0`` the fit is solved to default tolerance.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    fam = get_family("poisson")
    spec = LatticeSpec.chain(n, k)
    D = build_diff_lattice(spec)
    basis = polynomial_null_basis(spec)
    theta_star = -2.0 * np.log(n)
    beta_star = np.full(n, np.exp(theta_star))
    y = np.zeros(n)
    branches = []
    for lam2 in (0.0, float(lambda2)):
        sup: list[float] = []
        emp: list[float] = []
        pop: list[float] = []

        def record(it, th):
            sup.append(float(np.max(np.abs(th))))
            emp.append(empirical_risk(fam, th, y))
            pop.append(population_risk(fam, th, beta_star))

        if lam2 == 0.0:
            cfg = FitConfig(lambda1=lambda1, max_iter=max_iter, tol_abs=1e-300, tol_rel=1e-300, adapt_rho=True,
                            polish=False, divergence_bound=bound, dual_residual="augmented")
        else:
            cfg = FitConfig(lambda1=lambda1, lambda2=lam2, max_iter=max_iter)
        fit = fit_mle_tf(y, fam, D, basis, cfg, callback=record)
        th = fit.theta_hat
        branches.append(DegenerateBranch(
            lam2, fit.iterations, bool(fit.converged), bool(fit.diverged), sup, emp, pop,
            empirical_risk(fam, th, y), population_risk(fam, th, beta_star),
            float(np.linalg.norm(basis.project(th)) / np.sqrt(n))))
    return DegenerateReport(n, float(theta_star), float(fam.psi_double_prime(theta_star)), branches)
