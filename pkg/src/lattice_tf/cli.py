"""Command-line interface: ``fit``, ``tune``, ``simulate`` and ``eig``.

Grids are flat CSV files (one value per line under a ``value`` header, in
row-major lattice order) with an optional JSON sidecar ``<file>.json``
holding ``dims``, ``wrap``, ``family`` and the sufficient-statistic
transform. Floats are written in shortest round-trip form.

Exit codes: 0 success, 2 invalid input, 3 solver non-convergence (outputs
are still written), 4 dense-size limit.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import LatticeTFError, SizeLimitError
from .expfam import get_family
from .lattice import (LatticeSpec, ball_index_mask, build_diff_lattice, incoherence_constant,
                      kron_sum_eigenvalues, L_Jp, polynomial_null_basis)
from .risk import DIVERGENCE_LIMIT, CRITERIA, active_rows, divergence_trace, tune
from .sim import PRESETS, Scenario, degenerate_poisson_demo, run_scenario
from .solver import FitConfig, fit_mean_tf, fit_mle_tf, kkt_residual

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_SIZE = 0, 2, 3, 4
THREADS_ENV = "LATTICE_TF_THREADS"


class UsageError(Exception):
    """Invalid flags or input files."""


# grid files -----------------------------------------------------------------

def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_grid(path, values, dims, wrap=None, family=None, transform="none") -> None:
    """Writes a flat CSV grid and its JSON sidecar."""
    values = np.asarray(values, dtype=float).ravel()
    dims = [int(N) for N in dims]
    if values.size != int(np.prod(dims)):
        raise UsageError(f"{values.size} values do not fill dims {dims}")
    with open(path, "w", newline="") as fh:
        fh.write("value\n")
        fh.writelines(repr(float(v)) + "\n" for v in values)
    meta = {"schema_version": SCHEMA_VERSION, "dims": dims,
            "wrap": [bool(w) for w in (wrap if wrap is not None else [False] * len(dims))],
            "family": family, "transform": transform}
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_grid(path, dims=None) -> tuple[np.ndarray, dict]:
    """Values and sidecar metadata (empty if absent) of a grid file."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"cannot read {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and rows[0][0].strip().lower() == "value":
        rows = rows[1:]
    try:
        values = np.array([float(r[0]) for r in rows])
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None
    meta = json.loads(_sidecar(path).read_text()) if _sidecar(path).is_file() else {}
    if dims is not None and "dims" in meta and list(meta["dims"]) != list(dims):
        raise UsageError(f"--dims {list(dims)} disagree with sidecar dims {meta['dims']}")
    shape = dims if dims is not None else meta.get("dims", [values.size])
    if values.size != int(np.prod(shape)):
        raise UsageError(f"{path}: {values.size} values do not fill dims {list(shape)}")
    return values, meta


# flag parsing ---------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace("x", ",").split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected integers like 64x64, got {text!r}") from None


def _bool_list(text: str) -> list[bool]:
    out = []
    for t in text.replace("x", ",").split(","):
        t = t.strip().lower()
        if t in ("1", "true", "t", "yes"):
            out.append(True)
        elif t in ("0", "false", "f", "no"):
            out.append(False)
        else:
            raise UsageError(f"expected booleans like 0x1, got {text!r}")
    return out


def parse_grid_spec(text: str) -> np.ndarray:
    """A comma list ``0.1,1,10`` or ``logspace:START:STOP:NUM`` in log10 units."""
    text = text.strip()
    try:
        if text.startswith("logspace:"):
            a, b, num = text.split(":")[1:]
            return np.logspace(float(a), float(b), int(num))
        vals = np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise UsageError(f"bad grid {text!r}") from None
    if vals.size == 0:
        raise UsageError("empty grid")
    return vals


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, int(args.threads))
    env = os.environ.get(THREADS_ENV)
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None


def _spec(args, meta) -> LatticeSpec:
    dims = _int_list(args.dims) if args.dims else meta.get("dims")
    if not dims:
        raise UsageError("--dims is required when the input has no sidecar")
    orders = _int_list(args.orders)
    if len(orders) == 1:
        orders = orders * len(dims)
    if args.wrap:
        wrap = _bool_list(args.wrap)
        wrap = wrap * len(dims) if len(wrap) == 1 else wrap
    else:
        wrap = meta.get("wrap", [False] * len(dims))
    return LatticeSpec(tuple(dims), tuple(orders), tuple(wrap))


def _load_data(args):
    dims = _int_list(args.dims) if args.dims else None
    y, meta = read_grid(args.input, dims)
    family = get_family(args.family if args.family else meta.get("family") or "gaussian")
    transformed = meta.get("transform") == "log"
    if args.log_transform:
        if family.name != "chisq":
            raise UsageError("--log-transform applies to chisq data only")
        if transformed:
            raise UsageError("input sidecar says the data are already log-transformed")
        if np.any(y <= 0):
            raise UsageError("raw chi-squared values must be positive")
        y = np.log(y)
        transformed = True
    if family.name == "chisq" and not transformed:
        raise UsageError("chisq fits need log(y); pass --log-transform for raw chi-squared values")
    spec = _spec(args, meta)
    return y, family, spec


def _config(args) -> FitConfig:
    return FitConfig(lambda1=args.lambda1, lambda2=args.lambda2, box_K=args.box_K, tol_rel=args.tol,
                     tol_abs=args.tol_abs if args.tol_abs is not None else args.tol * 1e-2,
                     max_iter=args.max_iter, method=args.method)


# outputs --------------------------------------------------------------------

def _write_fit(out: str, fit, y, family, spec, D, basis, cfg, estimator) -> dict:
    fit_family = "gaussian" if estimator == "mean" else family
    write_grid(f"{out}_theta.csv", fit.theta_hat, spec.dims, spec.wrap, family.name)
    write_grid(f"{out}_beta.csv", fit.beta_hat, spec.dims, spec.wrap, family.name)
    lam2 = 0.0 if estimator == "mean" else cfg.lambda2
    kcfg = replace(cfg, lambda2=lam2)
    df = None
    if spec.n <= DIVERGENCE_LIMIT:
        act = active_rows(D, fit.theta_hat, cfg.active_tol, fit=fit, basis=basis)
        df = divergence_trace(fit_family, fit.theta_hat, act, lam2, basis)
    summary = {
        "schema_version": SCHEMA_VERSION, "software_version": __version__, "family": family.name,
        "estimator": estimator, "dims": list(spec.dims), "orders": list(spec.orders), "wrap": list(spec.wrap),
        "lambda1": fit.lambda1, "lambda2": lam2, "iterations": fit.iterations, "converged": bool(fit.converged),
        "polished": bool(fit.polished), "diverged": bool(fit.diverged), "method": cfg.method,
        "kkt_residual": kkt_residual(fit, y, fit_family, D, basis, kcfg), "df": df,
        "objective": fit.objective_trace[-1] if fit.objective_trace else None,
    }
    Path(f"{out}_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def _fit(y, family, spec, cfg, estimator):
    D = build_diff_lattice(spec)
    basis = polynomial_null_basis(spec)
    if estimator == "mean":
        fit = fit_mean_tf(y, D, cfg, basis)
    else:
        fit = fit_mle_tf(y, family, D, basis, cfg)
    return fit, D, basis


# subcommands ----------------------------------------------------------------

def cmd_fit(args) -> int:
    y, family, spec = _load_data(args)
    cfg = _config(args)
    fit, D, basis = _fit(y, family, spec, cfg, args.estimator)
    summary = _write_fit(args.out, fit, y, family, spec, D, basis, cfg, args.estimator)
    print(json.dumps(summary))
    return EXIT_OK if fit.converged else EXIT_NOT_CONVERGED


def cmd_tune(args) -> int:
    y, family, spec = _load_data(args)
    cfg = _config(args)
    D = build_diff_lattice(spec)
    basis = polynomial_null_basis(spec)
    report = tune(y, family, D, basis, parse_grid_spec(args.lambda1_grid), parse_grid_spec(args.lambda2_grid),
                  args.criterion, cfg, estimator=args.estimator, sigma_sq=args.sigma_sq,
                  pukl_subsample=args.pukl_subsample, seed=args.seed, workers=_threads(args))
    Path(f"{args.out}_report.json").write_text(report.to_json(indent=2) + "\n")
    fit = report.fits[report.selected]
    l1, l2 = report.selected_lambda
    sel = replace(cfg, lambda1=l1, lambda2=l2)
    _write_fit(args.out, fit, y, family, spec, D, basis, sel, args.estimator)
    print(json.dumps({"selected_lambda1": l1, "selected_lambda2": l2, "criterion": args.criterion}))
    return EXIT_OK if all(report.converged) else EXIT_NOT_CONVERGED


def _scenario(args) -> Scenario:
    if args.preset and args.scenario:
        raise UsageError("give either --preset or --scenario")
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)} or degenerate-poisson")
        sc = PRESETS[args.preset]
    elif args.scenario:
        text = Path(args.scenario).read_text() if Path(args.scenario).is_file() else args.scenario
        try:
            sc = Scenario(**json.loads(text))
        except (json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"bad scenario: {exc}") from None
    else:
        raise UsageError("--preset or --scenario is required")
    upd = {}
    if args.reps is not None:
        upd["replications"] = args.reps
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.n_grid:
        upd["n_grid"] = tuple(_int_list(args.n_grid))
    if args.estimate_n:
        upd["estimate_n"] = tuple(_int_list(args.estimate_n))
    return replace(sc, **upd)


def cmd_simulate(args) -> int:
    out = args.out
    if args.preset == "degenerate-poisson":
        n = _int_list(args.n_grid)[0] if args.n_grid else 100
        rep = degenerate_poisson_demo(n, lambda2=args.lambda2 if args.lambda2 is not None else 0.5)
        Path(f"{out}.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
        rep.rows_csv(f"{out}.csv")
        print(json.dumps({b.lambda2: {"diverged": b.diverged, "converged": b.converged,
                                      "empirical_risk": b.empirical_risk,
                                      "population_risk": b.population_risk} for b in rep.branches}))
        return EXIT_OK
    sc = _scenario(args)
    res = run_scenario(sc, workers=_threads(args))
    res.to_csv(f"{out}.csv", include_runtime=not args.no_timings)
    Path(f"{out}_manifest.json").write_text(json.dumps(res.manifest(), indent=2) + "\n")
    if res.estimates:
        res.estimates_csv(f"{out}_estimates.csv")
    med = {f"{n}/{e}": v for (n, e), v in res.medians().items()}
    print(json.dumps({"scenario": sc.name, "median": med}))
    bad = [r for r in res.rows if r.status != "ok"]
    return EXIT_OK if not bad else EXIT_NOT_CONVERGED


def cmd_eig(args) -> int:
    dims = _int_list(args.dims)
    orders = _int_list(args.orders)
    orders = orders * len(dims) if len(orders) == 1 else orders
    wrap = _bool_list(args.wrap) if args.wrap else [False] * len(dims)
    wrap = wrap * len(dims) if len(wrap) == 1 else wrap
    spec = LatticeSpec(tuple(dims), tuple(orders), tuple(wrap))
    eig = kron_sum_eigenvalues(spec)
    J = ball_index_mask(spec, args.J_radius) if args.J_radius is not None else None
    try:
        L = L_Jp(spec, J, args.p, args.mu, eig=eig)
    except ZeroDivisionError as exc:
        raise UsageError(str(exc)) from None
    axes = []
    for r, kap in zip(eig.rho_per_axis, spec.nullity_per_axis):
        pos = r[kap:]
        axes.append({"N": int(r.size), "zero_eigenvalues": int(kap),
                     "min_positive": float(pos.min()) if pos.size else None, "max": float(r[-1])})
    out = {"schema_version": SCHEMA_VERSION, "dims": list(spec.dims), "orders": list(spec.orders),
           "wrap": list(spec.wrap), "rho_per_axis": axes, "lambda_max": eig.lambda_max,
           "nullity": spec.nullity, "p": args.p, "mu": args.mu, "J_radius": args.J_radius, "L_Jp": L,
           "incoherence": None}
    code = EXIT_OK
    if not args.no_incoherence:
        D = build_diff_lattice(spec)
        try:
            out["incoherence"] = incoherence_constant(D)
        except SizeLimitError as exc:
            print(f"error: {exc}", file=sys.stderr)
            code = EXIT_SIZE
    print(json.dumps(out, indent=2))
    return code


# parser ---------------------------------------------------------------------

def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("input", help="CSV grid of observations")
    p.add_argument("--family", choices=["gaussian", "poisson", "exponential", "binomial", "chisq"])
    p.add_argument("--dims", help="lattice shape, e.g. 64x64 (defaults to the sidecar)")
    p.add_argument("--orders", default="0", help="trend order per axis, e.g. 1x1 or a single value")
    p.add_argument("--wrap", help="periodic axes, e.g. 0x1")
    p.add_argument("--lambda1", type=float, default=0.0)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--estimator", choices=["mle", "mean"], default="mle")
    p.add_argument("--box-K", dest="box_K", type=float)
    p.add_argument("--tol", type=float, default=1e-6, help="relative tolerance")
    p.add_argument("--tol-abs", dest="tol_abs", type=float, help="absolute tolerance (default tol / 100)")
    p.add_argument("--max-iter", dest="max_iter", type=int, default=5000)
    p.add_argument("--method", choices=["linearized", "axis", "auto", "ipm"], default="linearized")
    p.add_argument("--log-transform", dest="log_transform", action="store_true",
                   help="take log of raw chi-squared values")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threads", type=int, help=f"worker cap (default ${THREADS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lattice-tf", description="Exponential-family trend filtering on lattices")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit one penalty level")
    _fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="select penalties by a risk estimate")
    _fit_flags(p)
    p.add_argument("--criterion", choices=list(CRITERIA), required=True)
    p.add_argument("--lambda1-grid", dest="lambda1_grid", required=True,
                   help="comma list or logspace:START:STOP:NUM (log10)")
    p.add_argument("--lambda2-grid", dest="lambda2_grid", default="0")
    p.add_argument("--sigma-sq", dest="sigma_sq", type=float)
    p.add_argument("--pukl-subsample", dest="pukl_subsample", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("simulate", help="run a simulation scenario")
    p.add_argument("--preset", help=f"one of {sorted(PRESETS) + ['degenerate-poisson']}")
    p.add_argument("--scenario", help="scenario JSON (inline or file)")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-grid", dest="n_grid", help="sizes, e.g. 208,481,1000")
    p.add_argument("--estimate-n", dest="estimate_n", help="sizes whose per-vertex estimates are written")
    p.add_argument("--lambda2", type=float, help="null-space penalty of the degenerate-poisson branch")
    p.add_argument("--no-timings", dest="no_timings", action="store_true",
                   help="leave runtimes blank so outputs are byte-reproducible")
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("eig", help="eigenvalue diagnostics of D^T D")
    p.add_argument("--dims", required=True)
    p.add_argument("--orders", default="0")
    p.add_argument("--wrap")
    p.add_argument("--p", type=float, default=1.0)
    p.add_argument("--J-radius", dest="J_radius", type=float)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--no-incoherence", dest="no_incoherence", action="store_true")
    p.set_defaults(func=cmd_eig)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except SizeLimitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except (UsageError, LatticeTFError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
