"""Preset dosing policies and the two implementable learned baselines:
finite-horizon backward-induction Q-learning and fitted Q-iteration, both
with linear function classes, linear propensity terms, and discretized doses.

Estimator-side conventions (documented modeling error, mirroring what an
observational analyst could actually compute): the pre-treatment burden is
imputed as the first observed burden when building stage-1 states, and drug
concentrations for reward calculation are reconstructed from observed doses
with a nominal unit elimination rate since true per-patient rates are latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import ActionSpace
from .cohortsim import ObservedCohort, SimSetup, reward
from .pkpd import DoseFn
from .policy import instantiate_policy, random_dose_fn, synthetic10_dose_fn

BINARY_GRID = (0.0, 50.0)
FIVE_LEVEL_GRID = (0.0, 25.0, 50.0, 75.0, 100.0)

NOMINAL_GAMMA = 1.0
FQI_ITERATIONS = 50
FQI_DISCOUNT = 0.9
Q_DIVERGENCE_LIMIT = 1e6


class FqiDivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class DoseGrid:
    """Discrete dose levels with midpoint snap thresholds."""

    levels: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.levels) < 2 or list(self.levels) != sorted(self.levels):
            raise ValueError("grid needs at least two ascending levels")

    @property
    def thresholds(self) -> np.ndarray:
        lv = np.asarray(self.levels)
        return (lv[:-1] + lv[1:]) / 2.0

    def snap(self, dose: float) -> float:
        return float(self.levels[int(np.sum(dose > self.thresholds))])


def snap_dose(dose: float, grid: DoseGrid) -> float:
    return grid.snap(dose)


def grid_for_setup(setup: SimSetup) -> DoseGrid:
    """Native grid on binary setups; five levels when doses are continuous."""
    return DoseGrid(BINARY_GRID if setup.action_space == "binary" else FIVE_LEVEL_GRID)


# ---------------------------------------------------------------------------
# Preset policies
# ---------------------------------------------------------------------------

def inaction_dose_fn() -> DoseFn:
    return lambda e_hist, z_hist, t, rng: np.zeros(1)


def full_dosing_dose_fn(space: ActionSpace) -> DoseFn:
    dose = 100.0 if space.kind == "continuous" else 50.0
    return lambda e_hist, z_hist, t, rng: np.array([dose])


def expert_dose_fn(policy_type: str, space: ActionSpace) -> DoseFn:
    """The informed policy with exact table coefficients and no deviation."""
    return synthetic10_dose_fn(instantiate_policy(policy_type, space, rng=None))


def preset_policy(kind: str, setup: SimSetup, policy_type: str | None = None) -> DoseFn:
    """Dosing function for a named preset; `expert` also needs a policy type."""
    if kind == "inaction":
        return inaction_dose_fn()
    if kind == "full_dosing":
        return full_dosing_dose_fn(setup.space)
    if kind == "random":
        return random_dose_fn(setup.space)
    if kind == "expert":
        if policy_type is None:
            raise ValueError("expert preset needs the assigned policy type")
        return expert_dose_fn(policy_type, setup.space)
    raise ValueError(f"unknown preset: {kind!r}")


# ---------------------------------------------------------------------------
# Shared linear-Q machinery
# ---------------------------------------------------------------------------

def _stage_state(x: np.ndarray, e_prev: float, z_prev: float) -> np.ndarray:
    return np.concatenate([x, [e_prev, z_prev]])


def _observed_states(cohort: ObservedCohort, t: int) -> np.ndarray:
    """State rows for stage t (1-based) across patients observed at t.

    At t=1 the latent pre-treatment burden is imputed by the first observed
    burden and the previous dose is zero.
    """
    rows = []
    for pt in cohort.patients:
        if pt.T < t:
            continue
        e_prev = pt.e[t - 2] if t >= 2 else pt.e[0]
        z_prev = pt.z[0, t - 2] if t >= 2 else 0.0
        rows.append(_stage_state(pt.x, e_prev, z_prev))
    return np.array(rows)


def _fit_linear_propensity(states: np.ndarray, actions: np.ndarray,
                           grid: DoseGrid) -> np.ndarray:
    """Linear probability model per grid level: coefficients (L, 1+dim)."""
    A = np.column_stack([np.ones(len(states)), states])
    targets = np.stack([(actions == lv).astype(float) for lv in grid.levels], axis=1)
    coef, *_ = np.linalg.lstsq(A, targets, rcond=None)
    return coef.T


def _q_design(states: np.ndarray, actions: np.ndarray, grid: DoseGrid,
              prop_coef: np.ndarray) -> np.ndarray:
    """Rows [1, state, propensity(a|s), action dummies, dummies x e_prev]."""
    states = np.atleast_2d(states)
    n = len(states)
    levels = np.asarray(grid.levels)
    idx = np.searchsorted(levels, np.asarray(actions))
    ones = np.ones((n, 1))
    with_intercept = np.hstack([ones, states])
    prop = np.clip((with_intercept @ prop_coef.T)[np.arange(n), idx], 0.01, 0.99)[:, None]
    dummies = (idx[:, None] == np.arange(1, len(levels))[None, :]).astype(float)
    e_prev = states[:, -2][:, None]
    return np.hstack([ones, states, prop, dummies, dummies * e_prev])


def _fit_q(design: np.ndarray, target: np.ndarray, ridge: float) -> tuple[np.ndarray, bool]:
    """Least-squares stage fit; rank deficiency triggers a flagged ridge refit."""
    w, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    if rank == design.shape[1]:
        return w, False
    k = design.shape[1]
    w = np.linalg.solve(design.T @ design + ridge * np.eye(k), design.T @ target)
    return w, True


def _greedy_values(w: np.ndarray, states: np.ndarray, grid: DoseGrid,
                   prop_coef: np.ndarray) -> np.ndarray:
    """Greedy state values max_a Q(s, a) for a batch of states."""
    states = np.atleast_2d(states)
    per_level = [
        _q_design(states, np.full(len(states), lv), grid, prop_coef) @ w
        for lv in grid.levels
    ]
    return np.max(np.stack(per_level), axis=0)


def _greedy_level(w: np.ndarray, state: np.ndarray, grid: DoseGrid,
                  prop_coef: np.ndarray) -> float:
    vals = [
        float(_q_design(state[None, :], np.array([lv]), grid, prop_coef)[0] @ w)
        for lv in grid.levels
    ]
    return float(grid.levels[int(np.argmax(vals))])  # argmax ties keep the lower dose


@dataclass(frozen=True)
class GreedyQPolicy:
    """Greedy argmax policy over a dose grid from fitted stage models.

    Stage t uses weights[min(t, len(weights)) - 1]: beyond the fitted horizon
    the last stage's model is reused. A single weight vector (fitted
    Q-iteration) is stationary; its per-iteration max |target| path is kept
    for divergence diagnostics.
    """

    grid: DoseGrid
    weights: list[np.ndarray]
    prop_coef: np.ndarray
    ridge_fallback: bool = False
    target_scale_path: tuple[float, ...] = ()

    def dose_fn_for(self, x: np.ndarray) -> DoseFn:
        def fn(e_hist, z_hist, t, rng):
            state = _stage_state(x, e_hist[t - 1], z_hist[0, t - 1])
            w = self.weights[min(t, len(self.weights)) - 1]
            return np.array([_greedy_level(w, state, self.grid, self.prop_coef)])

        return fn


# ---------------------------------------------------------------------------
# Finite-horizon backward-induction Q-learning
# ---------------------------------------------------------------------------

def q_backward(cohort: ObservedCohort, grid: DoseGrid, ridge: float = 1e-3) -> GreedyQPolicy:
    """Backward recursion on the horizon every patient has observed.

    Stages are truncated to T_hat = min_i T_i so all patients contribute to
    every stage. The terminal target is the flipped outcome -Y (higher is
    better); earlier stages regress the successor stage's greedy value.
    Doses are snapped onto the grid and a linear propensity term enters every
    stage model.
    """
    if not cohort.patients:
        raise ValueError("empty dataset")
    t_hat = min(pt.T for pt in cohort.patients)

    states = [_observed_states(cohort, t) for t in range(1, t_hat + 1)]
    actions = [np.array([grid.snap(pt.z[0, t - 1]) for pt in cohort.patients])
               for t in range(1, t_hat + 1)]
    prop_coef = _fit_linear_propensity(np.vstack(states), np.concatenate(actions), grid)

    neg_y = -np.array([pt.y for pt in cohort.patients], dtype=float)
    weights: list[np.ndarray] = [np.empty(0)] * t_hat
    ridge_fallback = False
    value_next = neg_y
    for t in range(t_hat, 0, -1):
        design = _q_design(states[t - 1], actions[t - 1], grid, prop_coef)
        w, flagged = _fit_q(design, value_next, ridge)
        ridge_fallback = ridge_fallback or flagged
        weights[t - 1] = w
        if t > 1:
            value_next = _greedy_values(w, states[t - 1], grid, prop_coef)
    return GreedyQPolicy(grid=grid, weights=weights, prop_coef=prop_coef,
                         ridge_fallback=ridge_fallback)


# ---------------------------------------------------------------------------
# Fitted Q-iteration (infinite horizon)
# ---------------------------------------------------------------------------

def _transitions(cohort: ObservedCohort, grid: DoseGrid, reward_kind: str):
    """(state, snapped action, reward, next state) tuples from observed data.

    Rewards use the raw observed dose and a concentration series rebuilt with
    the nominal elimination rate; the transition at each patient's final
    observed step has no successor and is dropped.
    """
    s_rows, a_vals, r_vals, s_next = [], [], [], []
    for pt in cohort.patients:
        if pt.T < 2:
            continue
        conc = 0.0
        for t in range(1, pt.T):
            e_prev = pt.e[t - 2] if t >= 2 else pt.e[0]
            z_prev = pt.z[0, t - 2] if t >= 2 else 0.0
            z_t = pt.z[0, t - 1]
            conc = np.exp(-NOMINAL_GAMMA) * conc + z_t
            s_rows.append(_stage_state(pt.x, e_prev, z_prev))
            a_vals.append(grid.snap(z_t))
            r_vals.append(reward(reward_kind, e_prev, pt.e[t - 1], z_t, conc, pt.x))
            s_next.append(_stage_state(pt.x, pt.e[t - 1], z_t))
    return (np.array(s_rows), np.array(a_vals), np.array(r_vals), np.array(s_next))


def fitted_q_iteration(cohort: ObservedCohort, grid: DoseGrid, reward_kind: str,
                       iterations: int = FQI_ITERATIONS, discount: float = FQI_DISCOUNT,
                       ridge: float = 1e-3) -> GreedyQPolicy:
    """Iterate Q <- fit(r + discount * max_a Q(s', a)) with a linear model.

    A stationary propensity term enters the design. Aborts with a diagnostic
    if the Q scale blows past the divergence guard.
    """
    states, actions, rewards, next_states = _transitions(cohort, grid, reward_kind)
    if len(states) == 0:
        raise ValueError("no usable transitions in dataset")
    prop_coef = _fit_linear_propensity(states, actions, grid)
    design = _q_design(states, actions, grid, prop_coef)

    next_designs = [
        _q_design(next_states, np.full(len(next_states), lv), grid, prop_coef)
        for lv in grid.levels
    ]
    w = np.zeros(design.shape[1])
    ridge_fallback = False
    target_path = []
    for it in range(iterations):
        q_next = np.max(np.stack([nd @ w for nd in next_designs]), axis=0)
        target = rewards + discount * q_next
        scale = float(np.max(np.abs(target)))
        target_path.append(scale)
        if scale > Q_DIVERGENCE_LIMIT:
            raise FqiDivergenceError(
                f"Q targets exceeded {Q_DIVERGENCE_LIMIT:g} at iteration {it}"
            )
        w, flagged = _fit_q(design, target, ridge)
        ridge_fallback = ridge_fallback or flagged
    return GreedyQPolicy(grid=grid, weights=[w], prop_coef=prop_coef,
                         ridge_fallback=ridge_fallback, target_scale_path=tuple(target_path))
