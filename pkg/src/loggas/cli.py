"""Command-line entry point; exit status 0 iff every enabled check passes."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from typing import Optional, Sequence

from . import experiments as ex

COMMANDS = {
    "simulate": "chaos_rate",
    "solve-pde": "estimates_suite",
    "diagnose": "estimates_suite",
    "verify-estimates": "estimates_suite",
    "gibbs-identity": "gibbs_identity",
    "validate": "solver_validation",
}


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loggas", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "co-evolve particle ensembles and the mean-field PDE (chaos_rate)",
        "solve-pde": "run the mean-field PDE and write field checkpoints",
        "diagnose": "evaluate functionals on saved field and particle checkpoints",
        "verify-estimates": "run the estimate checks on a PDE trajectory",
        "gibbs-identity": "check the symmetrized-entropy identity for the confined system",
        "validate": "heat, Picard and treecode solver validation",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=_u64, help="base seed (overrides seed)")
        p.add_argument("--threads", type=_positive, default=1, help="worker threads")
    return parser


def load_config(command: str, path: Optional[str], out: Optional[str],
                seed: Optional[int]) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(path) if path else ex.default_config(COMMANDS[command])
    if command in ("simulate", "gibbs-identity", "validate", "verify-estimates") \
            and cfg.experiment != COMMANDS[command]:
        raise ex.ConfigError(f"{command} needs experiment = '{COMMANDS[command]}'")
    changes = {}
    if out is not None:
        changes["output_dir"] = out
    if seed is not None:
        changes["seed"] = seed
    return replace(cfg, **changes) if changes else cfg


def _set_threads(n: int) -> None:
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(command: str, cfg: ex.ExperimentConfig, threads: int = 1) -> bool:
    if command == "simulate":
        _, summary = ex.run_chaos_experiment(cfg, threads=threads)
        print(json.dumps(summary, indent=2, sort_keys=True))
        return True
    if command == "solve-pde":
        fields = ex.solve_pde(cfg)
        print(f"wrote {len(fields)} fields to {cfg.output_dir}")
        return True
    if command == "diagnose":
        return bool(ex.diagnose(cfg)["overall_pass"])
    if command == "verify-estimates":
        summary = ex.run_estimates_suite(cfg)["summary"]
        for name, ok in summary["pass"].items():
            print(f"{'PASS' if ok else 'FAIL'} {name}")
        for name, err in summary["errors"].items():
            print(f"ERROR {name}: {err}")
        return bool(summary["overall_pass"])
    if command == "gibbs-identity":
        report = ex.run_gibbs_identity(cfg)
        for name, chk in report["checks"].items():
            if "pass" in chk:
                print(f"{'PASS' if chk['pass'] else 'FAIL'} {name}")
        return bool(report["overall_pass"])
    report = ex.validate_solvers(cfg)
    for name, chk in report["checks"].items():
        print(f"{'PASS' if chk['pass'] else 'FAIL'} {name}")
    return bool(report["overall_pass"])


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.out, args.seed)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _set_threads(args.threads)
    return 0 if run(args.command, cfg, args.threads) else 1


if __name__ == "__main__":
    sys.exit(main())
