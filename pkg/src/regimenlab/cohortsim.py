"""Synthetic cohort generation: covariates, mechanistic parameters, horizons,
missingness, clinician-policy assignment, outcomes, and baseline rewards.

Each patient draws from an independent substream keyed by (seed, patient
index) so generation order and parallel scheduling never change the data.
The observed view truncates the final unobserved steps and hides everything
an estimator must not see (continuous outcome, parameters, the assigned
policy, the latent full trajectory).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__ as _version
from .actions import ActionSpace
from .pkpd import DeviationSpec, PkPdParams, Trajectory, simulate_trajectory
from .policy import PolicyParams, assign_policy, policy_from_text, policy_to_text, random_dose_fn, synthetic10_dose_fn
from .rng import ALGORITHM, substream

BURDEN_NOISE_SD = 2.5
DEVIATION_PROB = 0.05
OUTCOME_CUTOFF = 3.0

HORIZON_MODES = ("two_steps", "ten_to_fifteen")
MISSING_MODES = ("none", "variable")
ACTION_SPACES = ("continuous", "binary")
POLICY_MODES = ("random", "informed")

REWARD_KINDS = ("naive", "insightful", "oracle")


@dataclass(frozen=True)
class SimSetup:
    """One of the 32 experiment configurations plus cohort size and seed."""

    n: int
    p: int
    horizon_mode: str
    missing_mode: str
    action_space: str
    policy_mode: str
    seed: int

    def __post_init__(self) -> None:
        if self.p not in (10, 100):
            raise ValueError(f"p must be 10 or 100, got {self.p}")
        if self.horizon_mode not in HORIZON_MODES:
            raise ValueError(f"bad horizon_mode: {self.horizon_mode!r}")
        if self.missing_mode not in MISSING_MODES:
            raise ValueError(f"bad missing_mode: {self.missing_mode!r}")
        if self.action_space not in ACTION_SPACES:
            raise ValueError(f"bad action_space: {self.action_space!r}")
        if self.policy_mode not in POLICY_MODES:
            raise ValueError(f"bad policy_mode: {self.policy_mode!r}")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def space(self) -> ActionSpace:
        return ActionSpace(self.action_space)

    def horizon_range(self) -> tuple[int, int]:
        return (2, 2) if self.horizon_mode == "two_steps" else (10, 15)

    def missing_range(self) -> tuple[int, int]:
        if self.missing_mode == "none":
            return (0, 0)
        return (0, 1) if self.horizon_mode == "two_steps" else (2, 5)


def enumerate_setups(n: int = 1000, seed: int = 0) -> list[SimSetup]:
    """The 32 setups in fixed order: covariate count, horizon, missingness,
    action space, then policy mode, each cycling its second option fastest in
    the last position."""
    out = []
    for p in (10, 100):
        for horizon in HORIZON_MODES:
            for missing in MISSING_MODES:
                for space in ACTION_SPACES:
                    for policy in POLICY_MODES:
                        out.append(SimSetup(n=n, p=p, horizon_mode=horizon,
                                            missing_mode=missing, action_space=space,
                                            policy_mode=policy, seed=seed))
    return out


@dataclass(frozen=True)
class PatientRecord:
    """Oracle-side record: everything the data-generating process knows."""

    pid: int
    x: np.ndarray
    params: PkPdParams
    tau: int
    T: int
    trajectory: Trajectory
    o: float
    y: int
    assigned_policy: PolicyParams | None  # None under the random policy mode


@dataclass(frozen=True)
class ObservedPatient:
    """Estimator-side view: covariates, truncated series, binary outcome."""

    pid: int
    x: np.ndarray
    e: np.ndarray  # burdens, steps 1..T
    z: np.ndarray  # doses (n_drugs, T)
    y: int

    @property
    def T(self) -> int:
        return len(self.e)


@dataclass(frozen=True)
class ObservedCohort:
    setup: SimSetup
    patients: list[ObservedPatient]


@dataclass(frozen=True)
class OracleCohort:
    setup: SimSetup
    patients: list[PatientRecord]


@dataclass(frozen=True)
class PatientDraw:
    """Pre-trajectory sample: covariates, parameters, horizon, initial burden."""

    x: np.ndarray
    params: PkPdParams
    tau: int
    m: int
    e0: float


def sample_patient(setup: SimSetup, rng: np.random.Generator) -> PatientDraw:
    """Draw covariates and the correlated mechanistic parameters.

    x ~ iid N(0,1); beta ~ N(100 + 10*x1, 5); ed50 ~ N(15 - 2*x3, 1);
    gamma, alpha ~ N(1, 0.1); horizon and missing counts uniform over the
    setup's ranges; initial burden ~ N(75 + 5*x2, 5) clamped to [0, beta].
    Draw order is fixed and must not change (determinism contract).
    """
    x = rng.normal(0.0, 1.0, setup.p)
    beta = float(np.clip(rng.normal(100.0 + 10.0 * x[0], 5.0), 1e-6, 200.0))
    ed50 = max(rng.normal(15.0 - 2.0 * x[2], 1.0), 1e-6)
    gamma = max(rng.normal(1.0, 0.1), 1e-6)
    alpha = max(rng.normal(1.0, 0.1), 1e-6)
    lo, hi = setup.horizon_range()
    tau = int(rng.integers(lo, hi + 1))
    mlo, mhi = setup.missing_range()
    m = int(rng.integers(mlo, mhi + 1))
    e0 = float(np.clip(rng.normal(75.0 + 5.0 * x[1], 5.0), 0.0, beta))
    params = PkPdParams(beta=beta, gamma=[gamma], alpha=[alpha], ed50=[ed50])
    return PatientDraw(x=x, params=params, tau=tau, m=m, e0=e0)


def outcome(traj: Trajectory, x: np.ndarray, tau: int) -> tuple[float, int]:
    """Continuous outcome and its binarization at the fixed cutoff of 3.

    (1/tau) * [exp((x1+x2)/2) * sum_t (exp(E_t/50) - 1)
             + exp((x3+x4)/2) * sum_t (exp(D_t/50) - 1)]
    with the -1 applied per timestep term, which makes the per-step oracle
    reward telescope to exactly -tau * outcome. Lower is better.
    """
    if traj.n_drugs != 1:
        raise ValueError("outcome is defined for single-drug trajectories")
    if traj.tau != tau:
        raise ValueError("trajectory must cover all tau steps")
    burden_term = float(np.sum(np.exp(traj.burdens / 50.0) - 1.0))
    conc_term = float(np.sum(np.exp(traj.concs[0] / 50.0) - 1.0))
    o = (np.exp((x[0] + x[1]) / 2.0) * burden_term
         + np.exp((x[2] + x[3]) / 2.0) * conc_term) / tau
    return float(o), int(o > OUTCOME_CUTOFF)


def reward(kind: str, e_prev: float, e_t: float, z_t: float, d_t: float,
           x: np.ndarray) -> float:
    """Per-timestep reward used by the value-based baselines (higher is better)."""
    if kind == "naive":
        return (e_prev - e_t) + (50.0 - z_t) / 4.0
    if kind == "insightful":
        return -(np.exp(x[0]) * e_t + np.exp(x[2]) * z_t)
    if kind == "oracle":
        return -(np.exp((x[0] + x[1]) / 2.0) * (np.exp(e_t / 50.0) - 1.0)
                 + np.exp((x[2] + x[3]) / 2.0) * (np.exp(d_t / 50.0) - 1.0))
    raise ValueError(f"unknown reward kind: {kind!r}")


def _simulate_patient(setup: SimSetup, draw: PatientDraw,
                      rng: np.random.Generator) -> tuple[Trajectory, PolicyParams | None]:
    if setup.policy_mode == "informed":
        policy = assign_policy(draw.x, setup.space, rng)
        dose_fn = synthetic10_dose_fn(policy)
        deviation = DeviationSpec(DEVIATION_PROB, setup.space)
    else:
        policy = None
        dose_fn = random_dose_fn(setup.space)
        deviation = None
    traj = simulate_trajectory(draw.params, dose_fn, draw.e0, draw.tau,
                               BURDEN_NOISE_SD, deviation, rng)
    return traj, policy


def generate_patient(setup: SimSetup, pid: int) -> PatientRecord:
    """Full oracle record for one patient from its own substream."""
    rng = substream(setup.seed, "patient", pid)
    draw = sample_patient(setup, rng)
    traj, policy = _simulate_patient(setup, draw, rng)
    o, y = outcome(traj, draw.x, draw.tau)
    return PatientRecord(pid=pid, x=draw.x, params=draw.params, tau=draw.tau,
                         T=draw.tau - draw.m, trajectory=traj, o=o, y=y,
                         assigned_policy=policy)


def generate_cohort(setup: SimSetup) -> tuple[ObservedCohort, OracleCohort]:
    """Simulate n patients and split into observed and oracle datasets."""
    records = [generate_patient(setup, pid) for pid in range(setup.n)]
    observed = [
        ObservedPatient(pid=r.pid, x=r.x, e=r.trajectory.burdens[: r.T].copy(),
                        z=r.trajectory.doses[:, : r.T].copy(), y=r.y)
        for r in records
    ]
    return ObservedCohort(setup=setup, patients=observed), OracleCohort(setup=setup, patients=records)


# ---------------------------------------------------------------------------
# Serialization: columnar CSVs plus a key/value sidecar (schema in harness)
# ---------------------------------------------------------------------------

def setup_to_meta(setup: SimSetup) -> dict[str, str]:
    meta = {k: str(v) for k, v in dataclasses.asdict(setup).items()}
    meta["toolkit_version"] = _version
    meta["rng_algorithm"] = ALGORITHM
    return meta


def write_meta(meta: dict[str, str], path: Path) -> None:
    lines = [f"{k} = {v}" for k, v in meta.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    return meta


def setup_from_meta(meta: dict[str, str]) -> SimSetup:
    return SimSetup(n=int(meta["n"]), p=int(meta["p"]), horizon_mode=meta["horizon_mode"],
                    missing_mode=meta["missing_mode"], action_space=meta["action_space"],
                    policy_mode=meta["policy_mode"], seed=int(meta["seed"]))


def observed_frame(cohort: ObservedCohort) -> pd.DataFrame:
    """One row per patient: pid, y, T, covariates, padded burden/dose series."""
    t_max = max(pt.T for pt in cohort.patients)
    p = cohort.setup.p
    rows = []
    for pt in cohort.patients:
        row: dict[str, object] = {"pid": pt.pid, "y": pt.y, "T": pt.T}
        row.update({f"x{j + 1}": pt.x[j] for j in range(p)})
        for t in range(t_max):
            row[f"e{t + 1}"] = pt.e[t] if t < pt.T else np.nan
            row[f"z{t + 1}"] = pt.z[0, t] if t < pt.T else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def oracle_frame(cohort: OracleCohort) -> pd.DataFrame:
    tau_max = max(r.tau for r in cohort.patients)
    p = cohort.setup.p
    rows = []
    for r in cohort.patients:
        row: dict[str, object] = {
            "pid": r.pid, "o": r.o, "y": r.y, "tau": r.tau, "T": r.T,
            "e0": r.trajectory.e0, "beta": r.params.beta, "gamma": r.params.gamma[0],
            "alpha": r.params.alpha[0], "ed50": r.params.ed50[0],
            "assigned_policy": policy_to_text(r.assigned_policy) if r.assigned_policy else "",
            "policy_type": r.assigned_policy.policy_type or "" if r.assigned_policy else "",
        }
        row.update({f"x{j + 1}": r.x[j] for j in range(p)})
        for t in range(tau_max):
            inside = t < r.tau
            row[f"e{t + 1}"] = r.trajectory.burdens[t] if inside else np.nan
            row[f"z{t + 1}"] = r.trajectory.doses[0, t] if inside else np.nan
            row[f"d{t + 1}"] = r.trajectory.concs[0, t] if inside else np.nan
        rows.append(row)
    return pd.DataFrame(rows)


def write_dataset(observed: ObservedCohort, oracle: OracleCohort, outdir: Path) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    observed_frame(observed).to_csv(outdir / "observed_patients.csv", index=False)
    oracle_frame(oracle).to_csv(outdir / "oracle_patients.csv", index=False)
    write_meta(setup_to_meta(observed.setup), outdir / "dataset_meta.txt")


def read_observed(outdir: Path) -> ObservedCohort:
    outdir = Path(outdir)
    setup = setup_from_meta(read_meta(outdir / "dataset_meta.txt"))
    df = pd.read_csv(outdir / "observed_patients.csv", float_precision="round_trip")
    patients = []
    for _, row in df.iterrows():
        T = int(row["T"])
        x = np.array([row[f"x{j + 1}"] for j in range(setup.p)])
        e = np.array([row[f"e{t + 1}"] for t in range(T)])
        z = np.array([[row[f"z{t + 1}"] for t in range(T)]])
        patients.append(ObservedPatient(pid=int(row["pid"]), x=x, e=e, z=z, y=int(row["y"])))
    return ObservedCohort(setup=setup, patients=patients)
