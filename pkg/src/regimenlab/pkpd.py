"""Mechanistic one-compartment PK / Hill PD patient model.

Drug concentration follows exponential elimination plus instantaneous dosing;
the seizure-burden state responds to concentration through a saturating Hill
curve. The same equations drive both cohort simulation and per-patient
parameter estimation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from .actions import ActionSpace

BETA_MAX = 200.0

# dose_fn(e_hist, z_hist, t, rng) -> doses for step t, one entry per drug.
# e_hist[k] is the burden after step k (e_hist[0] = initial burden); z_hist
# has shape (n_drugs, t) with z_hist[:, 0] = 0 (no pre-treatment dose).
DoseFn = Callable[[np.ndarray, np.ndarray, int, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class PkPdParams:
    """Per-patient mechanistic parameters.

    beta is the drug-free burden level (percent scale); per drug j, gamma[j]
    is the elimination rate per timestep, alpha[j] the Hill coefficient, and
    ed50[j] the concentration producing half of the maximal effect.
    """

    beta: float
    gamma: np.ndarray
    alpha: np.ndarray
    ed50: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)))
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "ed50", np.atleast_1d(np.asarray(self.ed50, dtype=float)))
        if not 0.0 < self.beta <= BETA_MAX:
            raise ValueError(f"beta must lie in (0, {BETA_MAX}], got {self.beta}")
        if not (len(self.gamma) == len(self.alpha) == len(self.ed50)):
            raise ValueError("gamma, alpha, ed50 must have one entry per drug")
        for name, arr in (("gamma", self.gamma), ("alpha", self.alpha), ("ed50", self.ed50)):
            if np.any(arr <= 0.0):
                raise ValueError(f"{name} must be strictly positive, got {arr}")

    @property
    def n_drugs(self) -> int:
        return len(self.gamma)


@dataclass(frozen=True)
class Trajectory:
    """One simulated or observed patient course over tau timesteps.

    burdens[t-1], doses[:, t-1], concs[:, t-1] hold step t (t = 1..tau);
    e0 is the pre-treatment burden that seeded the process.
    """

    e0: float
    burdens: np.ndarray  # (tau,)
    doses: np.ndarray  # (n_drugs, tau)
    concs: np.ndarray  # (n_drugs, tau)

    def __post_init__(self) -> None:
        object.__setattr__(self, "burdens", np.asarray(self.burdens, dtype=float))
        object.__setattr__(self, "doses", np.atleast_2d(np.asarray(self.doses, dtype=float)))
        object.__setattr__(self, "concs", np.atleast_2d(np.asarray(self.concs, dtype=float)))
        if not (len(self.burdens) == self.doses.shape[1] == self.concs.shape[1]):
            raise ValueError("burden, dose, and concentration series must share length")

    @property
    def tau(self) -> int:
        return len(self.burdens)

    @property
    def n_drugs(self) -> int:
        return self.doses.shape[0]


@dataclass(frozen=True)
class DeviationSpec:
    """Per-timestep chance that the administered dose ignores the policy.

    With probability `prob` the dose is drawn instead: Normal(previous
    burden, 10) clamped into a continuous space, or uniform over the binary
    levels. Mirrors occasional clinician deviation from an assigned regime.
    """

    prob: float
    space: ActionSpace

    def draw(self, e_prev: float, rng: np.random.Generator) -> float:
        if self.space.kind == "continuous":
            return self.space.project(rng.normal(e_prev, 10.0))
        return self.space.sample_uniform(rng)


def pk_step(conc_prev: float, dose: float, gamma: float) -> float:
    """Advance drug concentration one timestep: exp(-gamma)*conc_prev + dose."""
    return np.exp(-gamma) * conc_prev + dose


def pd_burden(concs: np.ndarray, params: PkPdParams) -> float:
    """Burden implied by current concentrations under the Hill response.

    beta * (1 - sum_j c_j^alpha_j / (c_j^alpha_j + ed50_j^alpha_j)), clamped
    to [0, beta]: with several drugs the inhibition sum can exceed 1.
    """
    c = np.atleast_1d(np.asarray(concs, dtype=float))
    with np.errstate(over="ignore"):
        powed = c**params.alpha
        frac = np.divide(powed, powed + params.ed50**params.alpha,
                         out=np.ones_like(powed), where=np.isfinite(powed))
    raw = params.beta * (1.0 - float(np.sum(frac)))
    return float(min(max(raw, 0.0), params.beta))


def simulate_trajectory(
    params: PkPdParams,
    dose_fn: DoseFn,
    e0: float,
    tau: int,
    noise_sd: float,
    deviation: DeviationSpec | None,
    rng: np.random.Generator,
) -> Trajectory:
    """Roll the PK/PD system forward tau steps under a dosing policy.

    Per step: (1) decide deviation, (2) obtain the dose from the policy or
    the deviation draw, (3) advance concentrations, (4) set the burden to the
    Hill value plus Normal(0, noise_sd) noise, clamped to [0, beta]. The draw
    order is fixed so replay under the same generator state is bit-identical.
    """
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if not 0.0 <= e0 <= params.beta:
        raise ValueError(f"e0 must lie in [0, beta], got {e0}")
    nd = params.n_drugs
    e = np.empty(tau + 1)
    z = np.zeros((nd, tau + 1))
    d = np.zeros((nd, tau + 1))
    e[0] = e0
    for t in range(1, tau + 1):
        if deviation is not None and rng.random() < deviation.prob:
            dose = np.full(nd, deviation.draw(e[t - 1], rng))
        else:
            dose = np.atleast_1d(np.asarray(dose_fn(e[:t], z[:, :t], t, rng), dtype=float))
        d[:, t] = pk_step(d[:, t - 1], dose, params.gamma)
        clean = pd_burden(d[:, t], params)
        e[t] = min(max(clean + rng.normal(0.0, noise_sd), 0.0), params.beta)
        z[:, t] = dose
    return Trajectory(e0=e0, burdens=e[1:], doses=z[:, 1:], concs=d[:, 1:])


def predict_burdens(params: PkPdParams, doses: np.ndarray) -> np.ndarray:
    """Noise-free burden series implied by a dose series (concentrations from 0)."""
    doses = np.atleast_2d(np.asarray(doses, dtype=float))
    nd, tau = doses.shape
    decay = np.exp(-params.gamma)
    d = np.zeros(nd)
    out = np.empty(tau)
    for t in range(tau):
        d = decay * d + doses[:, t]
        out[t] = pd_burden(d, params)
    return out


@dataclass(frozen=True)
class PkPdFit:
    """Estimation result: parameters, achieved MSE, and quality flags."""

    params: PkPdParams
    loss: float
    converged: bool
    degenerate: bool = False


def _pack(params: PkPdParams, fixed_gammas: np.ndarray | None) -> np.ndarray:
    parts = [np.log([params.beta])]
    if fixed_gammas is None:
        parts.append(np.log(params.gamma))
    parts += [np.log(params.alpha), np.log(params.ed50)]
    return np.concatenate(parts)


def _unpack(theta: np.ndarray, nd: int, fixed_gammas: np.ndarray | None) -> PkPdParams:
    vals = np.exp(np.clip(theta, -30.0, 30.0))
    beta = min(vals[0], BETA_MAX)
    i = 1
    if fixed_gammas is None:
        gamma, i = vals[i : i + nd], i + nd
    else:
        gamma = fixed_gammas
    alpha = vals[i : i + nd]
    ed50 = vals[i + nd : i + 2 * nd]
    return PkPdParams(beta=beta, gamma=gamma, alpha=alpha, ed50=ed50)


N_STARTS = 5
MAX_EVALS = 2000
LOSS_TOL = 1e-8


def fit_pkpd(
    observed: Trajectory,
    fixed_gammas: np.ndarray | None = None,
    init: PkPdParams | None = None,
) -> PkPdFit:
    """Estimate PK/PD parameters by least squares on the burden series.

    Nelder-Mead simplex search over log-transformed parameters (positivity by
    construction), multi-started from 5 jittered initializations; when
    `fixed_gammas` is given (drug half-lives known a priori) only beta,
    alpha, and ed50 are free. The first start uses `init` when supplied.

    A trajectory with no dosing cannot identify the drug response: the fit
    degenerates to beta = mean burden and is flagged.
    """
    nd = observed.n_drugs
    e_obs = observed.burdens
    if fixed_gammas is not None:
        fixed_gammas = np.atleast_1d(np.asarray(fixed_gammas, dtype=float))
    n_free = 1 + 2 * nd + (0 if fixed_gammas is not None else nd)
    if observed.tau < n_free:
        raise ValueError(f"trajectory length {observed.tau} < {n_free} free parameters")

    if not np.any(observed.doses > 0.0):
        beta = float(np.clip(np.mean(e_obs), 1e-6, BETA_MAX))
        params = PkPdParams(beta=beta, gamma=np.ones(nd) if fixed_gammas is None else fixed_gammas,
                            alpha=np.ones(nd), ed50=np.full(nd, 15.0))
        return PkPdFit(params=params, loss=float(np.mean((e_obs - beta) ** 2)),
                       converged=True, degenerate=True)

    def loss(theta: np.ndarray) -> float:
        p = _unpack(theta, nd, fixed_gammas)
        return float(np.mean((predict_burdens(p, observed.doses) - e_obs) ** 2))

    if init is None:
        beta0 = float(np.clip(np.max(e_obs), 1.0, BETA_MAX))
        init = PkPdParams(beta=beta0, gamma=np.ones(nd) if fixed_gammas is None else fixed_gammas,
                          alpha=np.ones(nd), ed50=np.full(nd, 15.0))
    theta0 = _pack(init, fixed_gammas)

    jitter_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0xF17)))
    best, best_loss, converged = theta0, np.inf, False
    for start in range(N_STARTS):
        theta_start = theta0 if start == 0 else theta0 + jitter_rng.normal(0.0, 0.25, len(theta0))
        res = optimize.minimize(
            loss, theta_start, method="Nelder-Mead",
            options={"maxfev": MAX_EVALS, "fatol": LOSS_TOL, "xatol": 1e-6},
        )
        converged = converged or bool(res.success)
        if res.fun < best_loss:
            best, best_loss = res.x, float(res.fun)
    return PkPdFit(params=_unpack(best, nd, fixed_gammas), loss=best_loss, converged=converged)
