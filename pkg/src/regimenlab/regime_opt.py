"""Per-patient optimal-regime estimation over matched groups, plus
ground-truth evaluation of proposed regimes on the mechanistic simulator.

Two estimation modes: `uniform` interpolates the good-outcome neighbors'
policies with equal weights (the benchmark default); `simplex_search` fits a
local linear outcome surrogate on a wider context group and minimizes it
over the convex hull of the good neighbors' coefficient vectors.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cohortsim import BURDEN_NOISE_SD, PatientRecord, outcome
from .pkpd import DoseFn, simulate_trajectory
from .policy import PolicyParams, combine, synthetic10_dose_fn

PGD_ITERATIONS = 500
PGD_STEP = 0.1


@dataclass(frozen=True)
class RegimeEstimate:
    """Estimated optimal regime: convex weights over matched neighbors."""

    pid: int
    policy: PolicyParams
    neighbor_ids: np.ndarray
    weights: np.ndarray
    mode: str
    nu_hat: float | None = None
    fallback: bool = False  # surrogate fit was degenerate; used uniform weights


def project_to_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sorted-threshold rule)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cssv = np.cumsum(u) - 1.0
    rho = int(np.nonzero(u - cssv / np.arange(1, len(v) + 1) > 0)[0][-1])
    theta = cssv[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def fit_outcome_surrogate(coeff_rows: np.ndarray, y: np.ndarray,
                          ridge: float) -> tuple[np.ndarray, float] | None:
    """Ridge fit of outcomes on policy coefficients; None when degenerate.

    Returns (slope, intercept): the local linear surrogate used by
    simplex_search to rank candidate regimes within a matched group.
    """
    if float(np.var(y)) == 0.0:
        return None
    A = np.column_stack([np.ones(len(y)), coeff_rows])
    if np.linalg.matrix_rank(A) < A.shape[1]:
        return None
    penalty = ridge * np.eye(A.shape[1])
    penalty[0, 0] = 0.0  # leave the intercept unpenalized
    w = np.linalg.solve(A.T @ A + penalty, A.T @ y)
    return w[1:], float(w[0])


def _minimize_over_simplex(gradient: np.ndarray, iterations: int, step: float) -> np.ndarray:
    """Minimize a linear objective g.c over the simplex by projected gradient.

    Multi-start from every vertex and the centroid; since the objective is
    linear, every start and every final iterate is kept as a candidate and
    the best is returned, so the result never loses to a vertex.
    """
    k = len(gradient)
    starts = [np.eye(k)[i] for i in range(k)] + [np.full(k, 1.0 / k)]
    candidates = list(starts)
    for c in starts:
        c = c.copy()
        for _ in range(iterations):
            nxt = project_to_simplex(c - step * gradient)
            if np.max(np.abs(nxt - c)) < 1e-12:
                c = nxt
                break
            c = nxt
        candidates.append(c)
    values = [float(gradient @ c) for c in candidates]
    return candidates[int(np.argmin(values))]


def estimate_optimal(
    center_id: int,
    good_ids: np.ndarray,
    good_policies: list[PolicyParams],
    mode: str = "uniform",
    context_policies: list[PolicyParams] | None = None,
    context_y: np.ndarray | None = None,
    ridge: float = 1e-3,
    iterations: int = PGD_ITERATIONS,
    step: float = PGD_STEP,
) -> RegimeEstimate:
    """Estimate the optimal regime for one patient from its matched group.

    `uniform` averages the good neighbors' policies. `simplex_search` fits a
    linear surrogate of outcome on policy coefficients over the context group
    (good and bad neighbors; must have at least dim+1 members) and minimizes
    it over convex weights of the good neighbors; a degenerate surrogate
    (constant outcomes or rank-deficient design) falls back to uniform.
    """
    if len(good_policies) == 0:
        raise ValueError("matched group must be nonempty")
    template = good_policies[0].template_id
    if any(p.template_id != template for p in good_policies):
        raise ValueError("matched policies must share a template")
    k = len(good_policies)
    uniform_w = np.full(k, 1.0 / k)

    if mode == "uniform" or k == 1:
        weights, nu_hat, fallback = uniform_w, None, False
    elif mode == "simplex_search":
        if context_policies is None or context_y is None:
            raise ValueError("simplex_search needs a context group")
        dim = len(good_policies[0].coeffs)
        if len(context_policies) < dim + 1:
            raise ValueError(f"context group must have at least {dim + 1} members")
        rows = np.stack([p.coeffs for p in context_policies])
        fit = fit_outcome_surrogate(rows, np.asarray(context_y, dtype=float), ridge)
        if fit is None:
            weights, nu_hat, fallback = uniform_w, None, True
        else:
            slope, intercept = fit
            good_matrix = np.stack([p.coeffs for p in good_policies])
            gradient = good_matrix @ slope
            weights = _minimize_over_simplex(gradient, iterations, step)
            nu_hat = float(gradient @ weights + intercept)
            fallback = False
    else:
        raise ValueError(f"unknown mode: {mode!r}")

    policy = combine(good_policies, weights)
    return RegimeEstimate(pid=center_id, policy=policy, neighbor_ids=np.asarray(good_ids),
                          weights=weights, mode=mode, nu_hat=nu_hat, fallback=fallback)


def evaluate_regime(policy: PolicyParams | DoseFn, record: PatientRecord,
                    rollouts: int, rng: np.random.Generator,
                    noise_sd: float = BURDEN_NOISE_SD) -> tuple[float, float]:
    """Mean (continuous, binary) outcome of a regime on a patient's true model.

    Fresh trajectories of the patient's own length from its realized initial
    burden, burden noise on by default, no clinician deviation: the proposed
    regime is followed exactly.
    """
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    dose_fn = synthetic10_dose_fn(policy) if isinstance(policy, PolicyParams) else policy
    o_sum = 0.0
    y_sum = 0
    for _ in range(rollouts):
        traj = simulate_trajectory(record.params, dose_fn, record.trajectory.e0,
                                   record.tau, noise_sd, None, rng)
        o, y = outcome(traj, record.x, record.tau)
        o_sum += o
        y_sum += y
    return o_sum / rollouts, y_sum / rollouts


def export_estimates(estimates: list[RegimeEstimate], path: Path) -> None:
    """CSV of (patient id, mode, weights, coefficients, surrogate value)."""
    lines = ["pid,mode,weights,coefficients,nu_hat"]
    for est in estimates:
        w = ";".join(format(v, ".17g") for v in est.weights)
        c = ";".join(format(v, ".17g") for v in est.policy.coeffs)
        nu = "" if est.nu_hat is None else format(est.nu_hat, ".17g")
        lines.append(f"{est.pid},{est.mode},{w},{c},{nu}")
    Path(path).write_text("\n".join(lines) + "\n")
