"""Exponential-family trend filtering on lattices.

Penalized maximum-likelihood trend filters with Kronecker difference
operators, an ADMM solver with active-face certificates, Stein-type risk
estimates for tuning, and the simulation designs used to compare the MLE
and mean trend filters.
"""

__version__ = "0.1.0"

from .exceptions import (  # noqa: F401
    LatticeTFError, DimensionError, RankDeficiencyError, DomainError, SizeLimitError,
)
from .lattice import (  # noqa: F401
    LatticeSpec, SparseOperator, build_diff_1d, build_diff_lattice, polynomial_null_basis,
    NullSpaceBasis, kron_sum_eigenvalues, L_Jp, incoherence_constant,
)
from .expfam import Family, get_family, kl_divergence, kl_bar, sample, make_rng  # noqa: F401
from .solver import FitConfig, FitResult, fit_mle_tf, fit_mean_tf, fit_path, kkt_residual  # noqa: F401
from .risk import RiskReport, tune, divergence_trace, theory_lambda  # noqa: F401
from .sim import Scenario, ScenarioResult, run_scenario, degenerate_poisson_demo, PRESETS  # noqa: F401
