"""Dosing-policy templates, evaluation, per-patient fitting, and combination.

Three linear-score templates are supported: the 10-indicator synthetic
template used throughout the benchmark, and the two clinical templates
(continuous-infusion sedative, 12-hourly bolus non-sedative) driven by
rolling burden-window indicators. Policies are closed under convex
combination of their coefficient vectors; projection into the action space
happens only at evaluation time so the coefficient algebra stays linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import ActionSpace

STEPS_PER_HOUR = 1  # one abstract timestep per hour by default

SYNTHETIC10 = "synthetic10"
PROPOFOL = "propofol"
LEVETIRACETAM = "levetiracetam"

TEMPLATE_DIMS = {SYNTHETIC10: 10, PROPOFOL: 7, LEVETIRACETAM: 8}

POLICY_TYPES = ("aggressive", "moderate", "conservative")

# Coefficient means per policy type; continuous-space entries each get
# N(0, 1) jitter at assignment, binary-space entries are exact.
COEF_MEANS = {
    "continuous": {
        "aggressive": np.array([10.0, 10.0, 20.0, 20.0, 20.0, 20.0, 0.0, 0.0, 20.0, 0.0]),
        "moderate": np.array([0.0, 0.0, 10.0, 10.0, 20.0, 20.0, -10.0, -20.0, 20.0, -20.0]),
        "conservative": np.array([0.0, 0.0, 0.0, 0.0, 10.0, 20.0, -10.0, -20.0, 20.0, -20.0]),
    },
    "binary": {
        "aggressive": np.array([0.0, 50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        "moderate": np.array([0.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        "conservative": np.array([0.0, 0.0, 0.0, 0.0, 50.0, 0.0, -50.0, 0.0, 0.0, 0.0]),
    },
}


@dataclass(frozen=True)
class PolicyParams:
    """A policy template plus its coefficient vector and action space."""

    template_id: str
    coeffs: np.ndarray
    space: ActionSpace
    policy_type: str | None = None  # set when instantiated from a preset type

    def __post_init__(self) -> None:
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        want = TEMPLATE_DIMS.get(self.template_id)
        if want is None:
            raise ValueError(f"unknown template: {self.template_id!r}")
        if len(self.coeffs) != want:
            raise ValueError(f"{self.template_id} needs {want} coefficients, got {len(self.coeffs)}")


# ---------------------------------------------------------------------------
# Feature construction
# ---------------------------------------------------------------------------

def features_synthetic10(e_real: np.ndarray, z_real: np.ndarray, t: int) -> np.ndarray:
    """Ten binary dosing features at step t from the realized series.

    e_real[i] / z_real[i] hold burden and dose at step i+1 (the policy's
    history starts at step 1: before the first dose there is nothing to react
    to and every feature is 0). Six burden thresholds and two dose thresholds
    on step t-1, plus two 3-step rolling-window conjunctions gated to t >= 3;
    rolling windows truncate to the realized steps. The same function builds
    the regression design when administered policies are fitted back from
    observed data, so simulation and fitting see identical features.
    """
    if t < 1 or len(e_real) < t - 1 or len(z_real) < t - 1:
        raise ValueError("histories must cover steps 1..t-1")
    f = np.zeros(10)
    if t < 2:
        return f
    e_prev = e_real[t - 2]
    z_prev = z_real[t - 2]
    f[0] = e_prev > 10
    f[1] = e_prev > 20
    f[2] = e_prev > 30
    f[3] = e_prev > 40
    f[4] = e_prev > 60
    f[5] = e_prev > 80
    f[6] = z_prev > 25
    f[7] = z_prev > 50
    if t >= 3:
        lo = max(t - 3, 1)
        f[8] = (e_prev > 40) and (np.mean(e_real[lo - 1 : t - 1]) > 20)
        f[9] = (z_prev > 40) and (np.mean(z_real[lo - 1 : t - 1]) > 20)
    return f


def _window_mean(obs: np.ndarray, t: int, hours: int) -> float:
    """Mean over steps max(t-w, 1)..t-1; -inf when no step is realized yet."""
    lo = max(t - hours * STEPS_PER_HOUR, 1)
    window = obs[lo - 1 : t - 1]
    return float(np.mean(window)) if len(window) else -np.inf


def _clinical_burden_features(e_obs: np.ndarray, t: int) -> np.ndarray:
    m1 = _window_mean(e_obs, t, 1)
    m6 = _window_mean(e_obs, t, 6)
    m12 = _window_mean(e_obs, t, 12)
    f = np.zeros(7)
    f[0] = m1 > 25
    f[1] = m1 > 50
    f[2] = m1 > 75
    f[3] = m6 > 25
    f[4] = m6 > 50
    f[5] = (m1 > 25) and (m6 > 25)
    f[6] = (m6 > 25) and (m12 > 25)
    return f


def features_propofol(e_obs: np.ndarray, t: int) -> np.ndarray:
    """Seven rolling burden-window indicators (1h/6h/12h means, 25/50/75% cuts)."""
    return _clinical_burden_features(e_obs, t)


def features_levetiracetam(e_obs: np.ndarray, z_lev_obs: np.ndarray, t: int) -> np.ndarray:
    """Intercept plus the seven burden features, all gated by a 12h dose-free check."""
    lo = max(t - 12 * STEPS_PER_HOUR, 1)
    gate = float(np.sum(z_lev_obs[lo - 1 : t - 1]) == 0.0)
    return gate * np.concatenate(([1.0], _clinical_burden_features(e_obs, t)))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def score(policy: PolicyParams, features: np.ndarray) -> float:
    """Raw linear score before action-space projection."""
    return float(policy.coeffs @ np.asarray(features, dtype=float))


def evaluate(policy: PolicyParams, features: np.ndarray) -> float:
    """Dose for a feature vector: linear score projected into the action space."""
    return policy.space.project(score(policy, features))


def synthetic10_dose_fn(policy: PolicyParams):
    """Adapt a synthetic-template policy to the simulator's dosing interface.

    The simulator hands over padded histories whose slot 0 is the
    pre-treatment state; the template reacts to realized steps only.
    """
    if policy.template_id != SYNTHETIC10:
        raise ValueError("dose_fn requires the synthetic 10-feature template")

    def fn(e_hist, z_hist, t, rng):
        return np.array([evaluate(policy, features_synthetic10(e_hist[1:t], z_hist[0, 1:t], t))])

    return fn


def random_dose_fn(space: ActionSpace):
    """Uniform random dosing over the action space, one drug."""

    def fn(e_hist, z_hist, t, rng):
        return np.array([space.sample_uniform(rng)])

    return fn


def clinical_dose_fn(prop: PolicyParams, lev: PolicyParams):
    """Joint two-drug dosing from a sedative + bolus template pair.

    Drug 0 is the continuous-infusion sedative, drug 1 the 12-hourly bolus;
    both scores clamp to nonnegative doses.
    """
    if prop.template_id != PROPOFOL or lev.template_id != LEVETIRACETAM:
        raise ValueError("expected a (propofol, levetiracetam) template pair")

    def fn(e_hist, z_hist, t, rng):
        fp = features_propofol(e_hist[1:t], t)
        fl = features_levetiracetam(e_hist[1:t], z_hist[1, 1:t], t)
        return np.array([max(score(prop, fp), 0.0), max(score(lev, fl), 0.0)])

    return fn


# ---------------------------------------------------------------------------
# Assignment (data-generating side)
# ---------------------------------------------------------------------------

def assignment_probs(x: np.ndarray) -> np.ndarray:
    """Softmax over (mean(x1,x2), 0, mean(x3,x4)) for (aggressive, moderate, conservative)."""
    if len(x) < 4:
        raise ValueError("policy assignment needs at least 4 covariates")
    logits = np.array([np.mean(x[0:2]), 0.0, np.mean(x[2:4])])
    w = np.exp(logits - np.max(logits))
    return w / np.sum(w)


def assign_policy(x: np.ndarray, space: ActionSpace, rng: np.random.Generator,
                  jitter: bool = True) -> PolicyParams:
    """Draw a policy type from the covariate-tilted softmax and instantiate it.

    Patients with high mean(x1, x2) tend toward the aggressive profile, high
    mean(x3, x4) toward the conservative one. Continuous-space coefficients
    get per-patient N(0, 1) jitter; binary-space ones are exact.
    """
    probs = assignment_probs(x)
    kind = POLICY_TYPES[rng.choice(3, p=probs)]
    return instantiate_policy(kind, space, rng if jitter else None)


def instantiate_policy(kind: str, space: ActionSpace,
                       rng: np.random.Generator | None = None) -> PolicyParams:
    """Coefficients for a named policy type; jittered when rng is given."""
    coeffs = COEF_MEANS[space.kind][kind].copy()
    if rng is not None and space.kind == "continuous":
        coeffs = coeffs + rng.normal(0.0, 1.0, len(coeffs))
    return PolicyParams(template_id=SYNTHETIC10, coeffs=coeffs, space=space, policy_type=kind)


# ---------------------------------------------------------------------------
# Fitting administered policies from observed data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyFit:
    params: PolicyParams
    r2: float
    degenerate: bool = False  # no dose variation to explain
    low_confidence: bool = False  # rank-deficient design, ridge did the work


def synthetic10_observed_design(e_obs: np.ndarray, z_obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature rows and dose targets from an observed series (rows t = 2..T).

    The step-1 row is skipped: its features are identically zero, so it
    carries no information about the coefficients.
    """
    T = len(e_obs)
    rows = [features_synthetic10(e_obs[: t - 1], z_obs[: t - 1], t) for t in range(2, T + 1)]
    return np.array(rows), np.asarray(z_obs[1:T], dtype=float)


def _clinical_observed_design(e_obs: np.ndarray, z_obs: np.ndarray,
                              template_id: str) -> tuple[np.ndarray, np.ndarray]:
    z_obs = np.atleast_2d(z_obs)
    drug = 0 if template_id == PROPOFOL else 1
    T = len(e_obs)
    rows, targets = [], []
    for t in range(2, T + 1):
        if template_id == PROPOFOL:
            rows.append(features_propofol(e_obs[: t - 1], t))
        else:
            rows.append(features_levetiracetam(e_obs[: t - 1], z_obs[drug, : t - 1], t))
        targets.append(z_obs[drug, t - 1])
    return np.array(rows), np.array(targets)


def fit_policy(e_obs: np.ndarray, z_obs: np.ndarray, template_id: str,
               ridge: float = 1e-3, space: ActionSpace | None = None) -> PolicyFit:
    """Ridge-regress observed doses on template features.

    Per-patient series are short (often 10-15 rows against 10 coefficients),
    so a small ridge keeps the solve well-posed; rank deficiency is flagged
    rather than fatal. R^2 is in-sample.
    """
    e_obs = np.asarray(e_obs, dtype=float)
    if template_id == SYNTHETIC10:
        X, y = synthetic10_observed_design(e_obs, np.atleast_2d(z_obs)[0])
    elif template_id in (PROPOFOL, LEVETIRACETAM):
        X, y = _clinical_observed_design(e_obs, z_obs, template_id)
    else:
        raise ValueError(f"unknown template: {template_id!r}")
    if len(y) < 1:
        raise ValueError("need at least 2 observed timesteps to fit a policy")

    k = X.shape[1]
    coeffs = np.linalg.solve(X.T @ X + ridge * np.eye(k), X.T @ y)
    low_confidence = np.linalg.matrix_rank(X) < k

    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    degenerate = ss_tot == 0.0
    if degenerate and not np.any(y):
        coeffs = np.zeros(k)
    r2 = 0.0 if degenerate else 1.0 - float(np.sum((y - X @ coeffs) ** 2)) / ss_tot

    space = space or ActionSpace("continuous")
    params = PolicyParams(template_id=template_id, coeffs=coeffs, space=space)
    return PolicyFit(params=params, r2=r2, degenerate=degenerate, low_confidence=low_confidence)


# ---------------------------------------------------------------------------
# Convex combination
# ---------------------------------------------------------------------------

WEIGHT_TOL = 1e-9


def combine(policies: list[PolicyParams], weights: np.ndarray) -> PolicyParams:
    """Convex combination of same-template policies: weighted coefficient sum.

    Combination happens on raw coefficients; projection into the action space
    stays deferred to evaluation so the operation is linear.
    """
    if not policies:
        raise ValueError("need at least one policy")
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(policies):
        raise ValueError("one weight per policy required")
    template = policies[0].template_id
    if any(p.template_id != template for p in policies):
        raise ValueError("cannot combine policies from different templates")
    if np.any(weights < -WEIGHT_TOL) or abs(float(np.sum(weights)) - 1.0) > WEIGHT_TOL:
        raise ValueError("weights must be convex (nonnegative, summing to 1)")
    coeffs = np.sum(weights[:, None] * np.stack([p.coeffs for p in policies]), axis=0)
    return PolicyParams(template_id=template, coeffs=coeffs, space=policies[0].space)


# ---------------------------------------------------------------------------
# Serialization (dataset sidecar format)
# ---------------------------------------------------------------------------

def policy_to_text(policy: PolicyParams) -> str:
    """template;space;c1;...;cK with 17 significant digits (round-trip exact)."""
    coeffs = ";".join(format(c, ".17g") for c in policy.coeffs)
    return f"{policy.template_id};{policy.space.kind};{coeffs}"


def policy_from_text(text: str) -> PolicyParams:
    parts = text.split(";")
    template_id, kind = parts[0], parts[1]
    coeffs = np.array([float(c) for c in parts[2:]])
    return PolicyParams(template_id=template_id, coeffs=coeffs, space=ActionSpace(kind))
