"""Command line entry points.

Every subcommand except ``report`` takes an experiment config file.
Exit codes: 0 success, 1 config/validation failure, 2 runtime failure,
3 acceptance-window failure (so CI can gate on fitted rates).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .exceptions import (
    CatalogError,
    ConfigurationError,
    DomainError,
    ExitBsdeError,
    InvalidInput,
    StageFailure,
)
from .harness import load_config, run_experiment, verify_run_dir

_CONFIG_COMMANDS = {
    "validate": "parse and validate a config without running anything",
    "simulate": "run forward simulations and export exit times",
    "solve": "run simulations plus backward solves",
    "rates": "full pipeline: errors, fitted rates, toggled extras",
    "moments": "exit-time exponential-moment scan only",
    "checks": "structural theory checks only",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitbsde",
        description="Exit-time BSDE solver and verification harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _CONFIG_COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="experiment config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="override the worker count")
        sp.add_argument("--out", default=None,
                        help="override the output root directory")
    rp = sub.add_parser("report",
                        help="verify a run directory and gate its results")
    rp.add_argument("run_dir", help="out/<name>/<timestamp> directory")
    return parser


def _load(args):
    config = load_config(args.config)
    if args.seed is not None:
        # fold the seed into the config text so the manifest hash
        # reflects what actually ran
        note = f"\n; override: seed = {args.seed}"
        config = dataclasses.replace(config, seed=args.seed,
                                     text=config.text + note)
    # the worker count is an execution detail with no effect on any
    # artifact, so it stays out of the hashed config text
    workers_env = os.environ.get("EXITBSDE_WORKERS")
    if args.workers is not None:
        config = dataclasses.replace(config, workers=args.workers)
    elif workers_env:
        config = dataclasses.replace(config, workers=int(workers_env))
    return config


def _print_fits(table) -> bool:
    failed = False
    for fit in table.fits:
        line = (f"{fit.column}: slope {fit.slope:.4f} "
                f"+/- {fit.stderr:.4f} (n={fit.n_used})")
        if fit.window is not None:
            lo, hi = fit.window
            mark = "PASS" if fit.passed else "FAIL"
            line += f" window [{lo}, {hi}] {mark}"
            failed |= not fit.passed
        print(line)
    return failed


def _cmd_validate(args) -> int:
    config = _load(args)
    notes = config.validate()
    bench, spec = config.resolve_problem()
    print(f"config ok: {config.name} (problem {spec.name}, "
          f"{len(config.h_values)} stepsizes, seed {config.seed})")
    for note in notes:
        print(f"note: {note}")
    return 0


def _cmd_pipeline(args, stages, gate: bool, **force) -> int:
    config = _load(args)
    if force:
        config = dataclasses.replace(config, **force)
    table = run_experiment(config, out_root=args.out, stages=stages)
    print(f"artifacts: {table.out_dir}")
    if gate and table.fits:
        if _print_fits(table):
            return 3
    return 0


def _cmd_report(args) -> int:
    manifest = verify_run_dir(args.run_dir)
    run = Path(args.run_dir)
    print(f"run {manifest['name']}: config {manifest['config_sha256'][:12]}, "
          f"stages {', '.join(manifest['stages_completed']) or '(none)'}")
    for note in manifest.get("notes", []):
        print(f"note: {note}")
    print(f"artifacts verified: {len(manifest.get('artifacts', {}))}")
    failed = False
    fits_file = run / "rates_fit.csv"
    if fits_file.exists():
        for line in fits_file.read_text().splitlines()[1:]:
            col, slope, stderr, n_used, lo, hi, passed = line.split(",")
            msg = f"{col}: slope {float(slope):.4f} +/- {float(stderr):.4f}"
            if passed:
                mark = "PASS" if passed == "true" else "FAIL"
                msg += f" window [{lo}, {hi}] {mark}"
                failed |= passed != "true"
            print(msg)
    checks_file = run / "checks.json"
    if checks_file.exists():
        doc = json.loads(checks_file.read_text())
        gron = doc.get("gronwall", {})
        bad = gron.get("violations", 0)
        print(f"gronwall: {gron.get('chains', 0)} chains, "
              f"{bad} violations {'FAIL' if bad else 'PASS'}")
        failed |= bool(bad)
        kol = doc.get("kolmogorov", {})
        if kol:
            print(f"kolmogorov: alpha_p2 {kol.get('alpha_p2'):.4f}, "
                  f"alpha_p4 {kol.get('alpha_p4'):.4f}")
    return 3 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    dispatch = {
        "validate": lambda: _cmd_validate(args),
        "simulate": lambda: _cmd_pipeline(args, {"simulate"}, gate=False),
        "solve": lambda: _cmd_pipeline(args, {"simulate", "solve"},
                                       gate=False),
        "rates": lambda: _cmd_pipeline(args, None, gate=True),
        "moments": lambda: _cmd_pipeline(args, {"moments"}, gate=False,
                                         moments_enabled=True),
        "checks": lambda: _cmd_pipeline(args, {"checks"}, gate=False,
                                        checks_enabled=True),
        "report": lambda: _cmd_report(args),
    }
    try:
        return dispatch[args.command]()
    except (ConfigurationError, InvalidInput, CatalogError, DomainError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExitBsdeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
