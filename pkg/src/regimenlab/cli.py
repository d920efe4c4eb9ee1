"""Command-line entry point.

Subcommands: generate | run | sweep | report. Options resolve with
precedence flag > config file > default; the config file is plain text with
one `key = value` per line and `#` comments. The only environment override
is OUTPUT_DIR, standing in for a missing --out.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from .cohortsim import generate_cohort, write_dataset
from .harness import DEFAULT_METHODS, REGISTRY, RunConfig, report_frame, setup_for_sim, sweep

N_SETUPS = 32

# config keys settable from a file, with parsers
_CONFIG_KEYS = {
    "setups": str,
    "iters": int,
    "methods": str,
    "out": str,
    "jobs": int,
    "seed_offset": int,
    "n": int,
    "mode": str,
    "k": int,
    "caliper": float,
    "context_k": int,
    "rollouts": int,
    "folds": int,
    "ridge_policy": float,
    "ridge_nu": float,
    "ridge_q": float,
    "boost_rounds": int,
    "boost_lr": float,
    "fqi_iterations": int,
    "fqi_discount": float,
    "average_params": lambda s: s.lower() in ("1", "true", "yes"),
}


class ConfigError(ValueError):
    pass


def parse_config_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def parse_setups(text: str) -> list[int]:
    """Comma list of setup numbers or inclusive ranges, or 'all'."""
    if text.strip().lower() == "all":
        return list(range(1, N_SETUPS + 1))
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    bad = [s for s in out if not 1 <= s <= N_SETUPS]
    if bad:
        raise ConfigError(f"setup numbers must be in 1..{N_SETUPS}: {bad}")
    return out


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--setups", help="setup numbers, e.g. '1,3,5-8' or 'all'")
    parser.add_argument("--iters", type=int, help="iterations per setup (seed = iteration)")
    parser.add_argument("--methods", help="comma-separated method names")
    parser.add_argument("--jobs", type=int, help="parallel workers")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--seed-offset", type=int, dest="seed_offset")
    parser.add_argument("--n", type=int, help="patients per cohort")
    parser.add_argument("--mode", choices=["uniform", "simplex_search"])
    parser.add_argument("--k", type=int, help="matched-group size")
    parser.add_argument("--caliper", type=float, help="caliper radius instead of k-NN")
    parser.add_argument("--rollouts", type=int, help="evaluation rollouts per policy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regimen-lab")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "write a cohort dataset per selected setup"),
        ("run", "full pipeline on one setup"),
        ("sweep", "harness sweep over selected setups"),
        ("report", "summarize a sweep directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        if name == "report":
            p.add_argument("results", type=Path, help="sweep output directory")
        else:
            _add_common(p)
    return parser


_DEFAULTS = {
    "setups": "1",
    "iters": 20,
    "methods": ",".join(DEFAULT_METHODS),
    "out": "results",
    "jobs": 1,
    "seed_offset": 0,
    "n": 1000,
    "mode": "uniform",
    "k": 5,
    "caliper": None,
    "context_k": 25,
    "rollouts": 1,
    "folds": 5,
    "ridge_policy": 1e-3,
    "ridge_nu": 1e-3,
    "ridge_q": 1e-3,
    "boost_rounds": 100,
    "boost_lr": 0.1,
    "fqi_iterations": 50,
    "fqi_discount": 0.9,
    "average_params": False,
}


def resolve_options(args: argparse.Namespace) -> dict:
    values = dict(_DEFAULTS)
    file_values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    values.update(file_values)
    for key in _CONFIG_KEYS:
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            values[key] = flag_val
    if "OUTPUT_DIR" in os.environ and getattr(args, "out", None) is None and "out" not in file_values:
        values["out"] = os.environ["OUTPUT_DIR"]
    return values


def make_config(values: dict) -> RunConfig:
    methods = tuple(m.strip() for m in str(values["methods"]).split(",") if m.strip())
    unknown = [m for m in methods if m not in REGISTRY]
    if unknown:
        raise ConfigError(f"unknown methods: {unknown}; known: {sorted(REGISTRY)}")
    cfg_fields = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs = {k: v for k, v in values.items() if k in cfg_fields and k != "methods"}
    return RunConfig(methods=methods, **kwargs)


def cmd_generate(values: dict) -> int:
    outdir = Path(values["out"])
    cfg = make_config(values)
    for sim_id in parse_setups(str(values["setups"])):
        setup = setup_for_sim(sim_id, 1, cfg)
        observed, oracle = generate_cohort(setup)
        target = outdir / f"sim_{sim_id:02d}"
        write_dataset(observed, oracle, target)
        print(f"wrote {target} (n={setup.n}, seed={setup.seed})")
    return 0


def _do_sweep(values: dict, sim_ids: list[int]) -> int:
    cfg = make_config(values)
    outdir = Path(values["out"])
    frame = sweep(
        sim_ids, int(values["iters"]), cfg, outdir,
        progress=lambda r: print(f"Sim {r.sim_id} Iter {r.iteration} done"),
    )
    print(f"{len(frame)} result rows in {outdir}")
    return 0


def cmd_run(values: dict) -> int:
    sim_ids = parse_setups(str(values["setups"]))
    if len(sim_ids) != 1:
        raise ConfigError("run expects exactly one setup; use sweep for several")
    return _do_sweep(values, sim_ids)


def cmd_sweep(values: dict) -> int:
    return _do_sweep(values, parse_setups(str(values["setups"])))


def cmd_report(results: Path) -> int:
    try:
        frame = report_frame(results)
    except FileNotFoundError:
        print(f"error: no results in {results}", file=sys.stderr)
        return 1
    print(frame.to_string(index=False))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.results)
        values = resolve_options(args)
        if args.command == "generate":
            return cmd_generate(values)
        if args.command == "run":
            return cmd_run(values)
        return cmd_sweep(values)
    except (ConfigError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
