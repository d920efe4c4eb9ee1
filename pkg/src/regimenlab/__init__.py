"""regimen-lab: desk-scale simulation and estimation of optimal dosing regimes.

Pipeline pieces: mechanistic PK/PD patient simulation (`pkpd`), synthetic
cohort generation (`cohortsim`), policy templates and per-patient policy
inference (`policy`), learned-metric matching (`metric_matching`), matched
convex-interpolation regime estimation (`regime_opt`), comparison baselines
(`baselines`), and the benchmark harness plus CLI (`harness`, `cli`).
"""

__version__ = "0.1.0"

from .actions import ActionSpace
from .cohortsim import SimSetup, enumerate_setups, generate_cohort
from .harness import RunConfig, run_iteration, sweep
from .metric_matching import DistanceMetric, learn_metric, match
from .pkpd import PkPdParams, Trajectory, fit_pkpd, simulate_trajectory
from .policy import PolicyParams, combine, fit_policy
from .regime_opt import RegimeEstimate, estimate_optimal, evaluate_regime

__all__ = [
    "ActionSpace",
    "DistanceMetric",
    "PkPdParams",
    "PolicyParams",
    "RegimeEstimate",
    "RunConfig",
    "SimSetup",
    "Trajectory",
    "combine",
    "enumerate_setups",
    "estimate_optimal",
    "evaluate_regime",
    "fit_pkpd",
    "fit_policy",
    "generate_cohort",
    "learn_metric",
    "match",
    "run_iteration",
    "simulate_trajectory",
    "sweep",
]
