"""Benchmark harness: sweeps setups x seeds x methods and writes result files.

Result-file schemas
-------------------
Per-iteration files `all_sims_binary_outcomes.csv` / `all_sims_cont_outcomes.csv`
have columns

    Sim, Iter, Covs, T Setting, T Drop Setting, Binary Dose, Policy,
    <one column per method>

where Sim is the 1-based setup number in `cohortsim.enumerate_setups` order,
Iter doubles as the cohort seed, T Setting / T Drop Setting are "a"/"b"
option labels, Binary Dose is TRUE/FALSE, and Policy is random/informed.
Method cells hold the cohort-mean outcome under that method's proposed
per-patient policies; a failed method leaves the cell empty. Aggregate files
(`sims_*_{mean,std,median}.csv`) and the failure-count file
(`all_sims_nan.csv`) drop the Iter column. Dataset exports (see
`cohortsim.write_dataset`) are one observed and one oracle CSV, one row per
patient with padded per-step columns, plus a `key = value` sidecar.

Every (Sim, Iter) cell is a pure function of its inputs: cohorts, method
internals, and evaluation rollouts all draw from substreams keyed by content,
so reruns and different worker counts reproduce files bit-exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
import tempfile
from dataclasses import dataclass, field
from multiprocessing import Pool
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd

from . import __version__ as _version
from .cohortsim import (
    ObservedCohort,
    OracleCohort,
    SimSetup,
    enumerate_setups,
    generate_cohort,
)
from .metric_matching import honest_folds, learn_metric, match
from .pkpd import DoseFn
from .policy import (
    POLICY_TYPES,
    SYNTHETIC10,
    assignment_probs,
    combine,
    fit_policy,
    synthetic10_dose_fn,
)
from .regime_opt import estimate_optimal, evaluate_regime
from .rng import ALGORITHM, substream
from . import baselines

SETUP_COLUMNS = ["Sim", "Iter", "Covs", "T Setting", "T Drop Setting", "Binary Dose", "Policy"]
DEFAULT_METHODS = [
    "Observed", "Expert", "Inaction", "Full Dosing", "Random",
    "Linear Q-learning", "Linear Inf Insightful", "Matching",
]

RESULT_FILES = {
    "binary": "all_sims_binary_outcomes.csv",
    "cont": "all_sims_cont_outcomes.csv",
    "nan": "all_sims_nan.csv",
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a (Sim, Iter) cell depends on besides the setup itself."""

    n: int = 1000
    methods: tuple[str, ...] = tuple(DEFAULT_METHODS)
    mode: str = "uniform"  # or "simplex_search"
    k: int = 5
    caliper: float | None = None
    context_k: int = 25
    rollouts: int = 1
    folds: int = 5
    ridge_policy: float = 1e-3
    ridge_nu: float = 1e-3
    ridge_q: float = 1e-3
    boost_rounds: int = 100
    boost_lr: float = 0.1
    fqi_iterations: int = 50
    fqi_discount: float = 0.9
    average_params: bool = False
    seed_offset: int = 0
    jobs: int = 1

    def content_hash(self) -> str:
        payload = repr(sorted(dataclasses.asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class MethodOutput:
    """Either per-patient policy proposals to evaluate, or direct outcomes."""

    proposals: list[list[DoseFn]] | None = None
    direct: tuple[np.ndarray, np.ndarray] | None = None  # (o, y) per patient


MethodFn = Callable[[ObservedCohort, OracleCohort, RunConfig, SimSetup, int], MethodOutput]

REGISTRY: dict[str, MethodFn] = {}


def register_method(name: str, fn: MethodFn) -> None:
    REGISTRY[name] = fn


# ---------------------------------------------------------------------------
# Method implementations
# ---------------------------------------------------------------------------

def _observed_method(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
    o = np.array([r.o for r in oracle.patients])
    y = np.array([pt.y for pt in observed.patients], dtype=float)
    return MethodOutput(direct=(o, y))


def _expert_method(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
    """The assigned informed policy with exact coefficients and no deviation.

    Reference baseline with generator-side knowledge: reuses each patient's
    realized policy type (or draws one by the assignment probabilities when
    the cohort was generated under random dosing).
    """
    proposals = []
    for record in oracle.patients:
        if record.assigned_policy is not None:
            kind = record.assigned_policy.policy_type
        else:
            rng = substream(setup.seed, "method", sim_id, "Expert", record.pid)
            kind = POLICY_TYPES[rng.choice(3, p=assignment_probs(record.x))]
        proposals.append([baselines.expert_dose_fn(kind, setup.space)])
    return MethodOutput(proposals=proposals)


def _preset_method(kind: str) -> MethodFn:
    def fn(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
        return MethodOutput(
            proposals=[[baselines.preset_policy(kind, setup)] for _ in observed.patients]
        )

    return fn


def _q_backward_method(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
    policy = baselines.q_backward(observed, baselines.grid_for_setup(setup), cfg.ridge_q)
    return MethodOutput(proposals=[[policy.dose_fn_for(pt.x)] for pt in observed.patients])


def _fqi_method(reward_kind: str) -> MethodFn:
    def fn(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
        policy = baselines.fitted_q_iteration(
            observed, baselines.grid_for_setup(setup), reward_kind,
            iterations=cfg.fqi_iterations, discount=cfg.fqi_discount, ridge=cfg.ridge_q,
        )
        return MethodOutput(proposals=[[policy.dose_fn_for(pt.x)] for pt in observed.patients])

    return fn


def match_features(oracle: OracleCohort) -> np.ndarray:
    """Covariates plus the true mechanistic parameters, one row per patient.

    The synthetic benchmark skips per-patient parameter estimation and
    matches on the known generating parameters (fair-comparison convention);
    swap in `pkpd.fit_pkpd` estimates when parameters are unknown.
    """
    return np.array([
        np.concatenate([r.x, [r.params.beta, r.params.gamma[0],
                              r.params.alpha[0], r.params.ed50[0]]])
        for r in oracle.patients
    ])


def _matching_method(observed, oracle, cfg, setup, sim_id) -> MethodOutput:
    """The matching pipeline: fit administered policies, learn a metric per
    rotation fold, match to good-outcome neighbors, interpolate regimes.

    Each patient is estimated once per rotation in which it sits in the
    estimation split (folds - 1 times); the per-rotation regimes are either
    evaluated separately and averaged (default) or collapsed into one
    parameter-averaged policy (`average_params`).
    """
    n = setup.n
    y = np.array([pt.y for pt in observed.patients])
    V = match_features(oracle)

    fits: list = [None] * n
    for pt in observed.patients:
        if pt.T >= 2:
            fits[pt.pid] = fit_policy(pt.e, pt.z, SYNTHETIC10, cfg.ridge_policy,
                                      space=setup.space)

    folds = honest_folds(n, cfg.folds, substream(setup.seed, "folds", sim_id))
    dim = 10
    estimates: list[list] = [[] for _ in range(n)]
    for f in range(cfg.folds):
        metric = learn_metric(V[folds == f], y[folds == f],
                              rounds=cfg.boost_rounds, learning_rate=cfg.boost_lr)
        est_ids = np.nonzero(folds != f)[0]
        cand_ids = np.array([i for i in est_ids if fits[i] is not None])
        cand_V, cand_y = V[cand_ids], y[cand_ids]
        for i in est_ids:
            if cfg.caliper is not None:
                group = match(i, V[i], cand_ids, cand_V, cand_y, metric,
                              caliper=cfg.caliper, filter_good=True)
                if len(group) == 0:  # empty caliper group: take the nearest good unit
                    group = match(i, V[i], cand_ids, cand_V, cand_y, metric,
                                  k=1, filter_good=True)
            else:
                group = match(i, V[i], cand_ids, cand_V, cand_y, metric,
                              k=cfg.k, filter_good=True)
            good_policies = [fits[j].params for j in group.neighbor_ids]
            n_avail = len(cand_ids) - int(i in cand_ids)
            if cfg.mode == "simplex_search" and n_avail >= dim + 1:
                ctx = match(i, V[i], cand_ids, cand_V, cand_y, metric,
                            k=min(cfg.context_k, n_avail), filter_good=False)
                ctx_policies = [fits[j].params for j in ctx.neighbor_ids]
                ctx_y = y[ctx.neighbor_ids]
                est = estimate_optimal(i, group.neighbor_ids, good_policies,
                                       mode="simplex_search", context_policies=ctx_policies,
                                       context_y=ctx_y, ridge=cfg.ridge_nu)
            else:
                est = estimate_optimal(i, group.neighbor_ids, good_policies, mode="uniform")
            estimates[i].append(est.policy)

    proposals = []
    for plist in estimates:
        if cfg.average_params:
            plist = [combine(plist, np.full(len(plist), 1.0 / len(plist)))]
        proposals.append([synthetic10_dose_fn(p) for p in plist])
    return MethodOutput(proposals=proposals)


register_method("Observed", _observed_method)
register_method("Expert", _expert_method)
register_method("Inaction", _preset_method("inaction"))
register_method("Full Dosing", _preset_method("full_dosing"))
register_method("Random", _preset_method("random"))
register_method("Linear Q-learning", _q_backward_method)
register_method("Linear Inf Naive", _fqi_method("naive"))
register_method("Linear Inf Insightful", _fqi_method("insightful"))
register_method("Linear Inf Oracle", _fqi_method("oracle"))
register_method("Matching", _matching_method)


# ---------------------------------------------------------------------------
# Iteration driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    sim_id: int
    iteration: int
    setup: SimSetup
    binary: dict[str, float] = field(default_factory=dict)
    cont: dict[str, float] = field(default_factory=dict)
    failed: dict[str, bool] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)


def setup_columns(sim_id: int, iteration: int | None, setup: SimSetup) -> dict[str, object]:
    cols: dict[str, object] = {"Sim": sim_id}
    if iteration is not None:
        cols["Iter"] = iteration
    cols.update({
        "Covs": setup.p,
        "T Setting": "a" if setup.horizon_mode == "two_steps" else "b",
        "T Drop Setting": "a" if setup.missing_mode == "none" else "b",
        "Binary Dose": "TRUE" if setup.action_space == "binary" else "FALSE",
        "Policy": setup.policy_mode,
    })
    return cols


def setup_for_sim(sim_id: int, iteration: int, cfg: RunConfig) -> SimSetup:
    setups = enumerate_setups(n=cfg.n)
    if not 1 <= sim_id <= len(setups):
        raise ValueError(f"Sim must be in 1..{len(setups)}, got {sim_id}")
    return dataclasses.replace(setups[sim_id - 1], seed=iteration + cfg.seed_offset)


def _evaluate_proposals(out: MethodOutput, oracle: OracleCohort, cfg: RunConfig,
                        setup: SimSetup, sim_id: int, name: str) -> tuple[float, float]:
    o_vals, y_vals = [], []
    for record, fns in zip(oracle.patients, out.proposals):
        o_i, y_i = 0.0, 0.0
        for j, fn in enumerate(fns):
            rng = substream(setup.seed, "eval", sim_id, name, record.pid, j)
            o, yy = evaluate_regime(fn, record, cfg.rollouts, rng)
            o_i += o
            y_i += yy
        o_vals.append(o_i / len(fns))
        y_vals.append(y_i / len(fns))
    return float(np.mean(o_vals)), float(np.mean(y_vals))


def run_iteration(sim_id: int, iteration: int, cfg: RunConfig,
                  methods: tuple[str, ...] | None = None) -> RunResult:
    """Generate the cohort for (Sim, Iter), run every method, evaluate.

    Method exceptions become failure flags; they never abort the iteration.
    """
    if iteration < 1:
        raise ValueError("iterations are 1-based")
    setup = setup_for_sim(sim_id, iteration, cfg)
    observed, oracle = generate_cohort(setup)
    result = RunResult(sim_id=sim_id, iteration=iteration, setup=setup)
    for name in methods or cfg.methods:
        if name not in REGISTRY:
            raise KeyError(f"method {name!r} is not registered")
        try:
            out = REGISTRY[name](observed, oracle, cfg, setup, sim_id)
            if out.direct is not None:
                o_mean, y_mean = float(np.mean(out.direct[0])), float(np.mean(out.direct[1]))
            else:
                o_mean, y_mean = _evaluate_proposals(out, oracle, cfg, setup, sim_id, name)
            result.binary[name] = y_mean
            result.cont[name] = o_mean
            result.failed[name] = False
        except Exception as exc:  # fail soft: record and continue
            result.binary[name] = np.nan
            result.cont[name] = np.nan
            result.failed[name] = True
            result.errors[name] = f"{type(exc).__name__}: {exc}"
    return result


# ---------------------------------------------------------------------------
# Sweep with resume, parallel workers, and atomic file commits
# ---------------------------------------------------------------------------

def _atomic_write_csv(df: pd.DataFrame, path: Path) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        df.to_csv(tmp, index=False)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _result_rows(result: RunResult, cfg: RunConfig) -> tuple[dict, dict]:
    base = setup_columns(result.sim_id, result.iteration, result.setup)
    brow = dict(base)
    crow = dict(base)
    for name in cfg.methods:
        brow[name] = result.binary.get(name, np.nan)
        crow[name] = result.cont.get(name, np.nan)
    return brow, crow


def _run_task(args: tuple[int, int, RunConfig]) -> RunResult:
    sim_id, iteration, cfg = args
    return run_iteration(sim_id, iteration, cfg)


def _load_existing(outdir: Path, cfg: RunConfig) -> tuple[list[dict], list[dict]]:
    bpath = outdir / RESULT_FILES["binary"]
    cpath = outdir / RESULT_FILES["cont"]
    if not bpath.exists() or not cpath.exists():
        return [], []
    bdf = pd.read_csv(bpath, float_precision="round_trip")
    cdf = pd.read_csv(cpath, float_precision="round_trip")
    want = SETUP_COLUMNS + list(cfg.methods)
    if list(bdf.columns) != want or list(cdf.columns) != want:
        raise ValueError(
            "existing result files use a different column set; "
            "point --out at a fresh directory or match the method list"
        )
    return bdf.to_dict("records"), cdf.to_dict("records")


def _write_all(outdir: Path, cfg: RunConfig, brows: list[dict], crows: list[dict]) -> None:
    columns = SETUP_COLUMNS + list(cfg.methods)
    key = lambda r: (r["Sim"], r["Iter"])
    bdf = pd.DataFrame(sorted(brows, key=key), columns=columns)
    cdf = pd.DataFrame(sorted(crows, key=key), columns=columns)
    _atomic_write_csv(bdf, outdir / RESULT_FILES["binary"])
    _atomic_write_csv(cdf, outdir / RESULT_FILES["cont"])


def _aggregate(outdir: Path, cfg: RunConfig) -> None:
    methods = list(cfg.methods)
    group_cols = [c for c in SETUP_COLUMNS if c != "Iter"]
    for stem in ("binary", "cont"):
        df = pd.read_csv(outdir / RESULT_FILES[stem], float_precision="round_trip")
        grouped = df.groupby(group_cols, sort=True)[methods]
        for stat, agg in (("mean", "mean"), ("std", "std"), ("median", "median")):
            out = grouped.agg(agg).reset_index()
            _atomic_write_csv(out, outdir / f"sims_{stem}_outcomes_{stat}.csv")
    # failure counts come straight from empty cells in the binary file
    df = pd.read_csv(outdir / RESULT_FILES["binary"], float_precision="round_trip")
    nan_counts = df.groupby(group_cols, sort=True)[methods].agg(
        lambda col: int(col.isna().sum())
    ).reset_index()
    _atomic_write_csv(nan_counts, outdir / RESULT_FILES["nan"])


def _write_manifest(outdir: Path, cfg: RunConfig) -> None:
    lines = [
        f"toolkit_version = {_version}",
        f"rng_algorithm = {ALGORITHM}",
        f"config_hash = {cfg.content_hash()}",
        f"methods = {','.join(cfg.methods)}",
    ]
    (outdir / "manifest.txt").write_text("\n".join(lines) + "\n")


def sweep(sim_ids: list[int], iterations: int, cfg: RunConfig, outdir: Path,
          progress: Callable[[RunResult], None] | None = None) -> pd.DataFrame:
    """Run (Sim, Iter) cells, committing result files after every completion.

    Existing (Sim, Iter) rows in the output directory are kept and skipped,
    so interrupted sweeps resume. Returns the final binary-outcome frame.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    brows, crows = _load_existing(outdir, cfg)
    done = {(r["Sim"], r["Iter"]) for r in brows}
    tasks = [(sim, it, cfg) for sim in sim_ids for it in range(1, iterations + 1)
             if (sim, it) not in done]

    def commit(result: RunResult) -> None:
        brow, crow = _result_rows(result, cfg)
        brows.append(brow)
        crows.append(crow)
        _write_all(outdir, cfg, brows, crows)
        if progress is not None:
            progress(result)

    if cfg.jobs > 1 and len(tasks) > 1:
        with Pool(processes=cfg.jobs) as pool:
            for result in pool.imap_unordered(_run_task, tasks):
                commit(result)
    else:
        for task in tasks:
            commit(_run_task(task))

    if not brows:
        raise ValueError("nothing to sweep: no tasks and no existing results")
    _write_all(outdir, cfg, brows, crows)
    _aggregate(outdir, cfg)
    _write_manifest(outdir, cfg)
    return pd.read_csv(outdir / RESULT_FILES["binary"], float_precision="round_trip")


def report_frame(outdir: Path) -> pd.DataFrame:
    """Per-setup `mean +/- std` strings per method from a sweep directory."""
    outdir = Path(outdir)
    mean_path = outdir / "sims_binary_outcomes_mean.csv"
    std_path = outdir / "sims_binary_outcomes_std.csv"
    if not mean_path.exists() or not std_path.exists():
        raise FileNotFoundError(f"no results in {outdir}")
    mean = pd.read_csv(mean_path)
    std = pd.read_csv(std_path)
    group_cols = [c for c in SETUP_COLUMNS if c != "Iter"]
    methods = [c for c in mean.columns if c not in group_cols]
    out = mean[group_cols].copy()
    for m in methods:
        out[m] = [
            f"{mu:.3f} +/- {sd:.3f}" if np.isfinite(mu) else "n/a"
            for mu, sd in zip(mean[m], std[m].fillna(0.0))
        ]
    return out
