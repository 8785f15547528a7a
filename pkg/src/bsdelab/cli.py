"""Command line entry point: ``bsde-lab <experiment> --config run.toml``."""

from __future__ import annotations

import argparse
import sys

from . import runner
from .config import EXPERIMENTS, ConfigError, load, validate
from .models import PRPViolation
from .solver import SolverError
from .tree import TreeError


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bsde-lab", description="BSDEs on finite scenario trees")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="TOML config with dotted keys")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--trials", type=int, help="number of seeded trials")
    p = sub.add_parser("report", help="summarize and re-hash a finished run")
    p.add_argument("--out", default="runs/latest", help="run directory")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--trials", type=int, help=argparse.SUPPRESS)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "report":
        text, code = runner.report(args.out)
        print(text)
        return code
    try:
        if args.config:
            cfg = load(args.config, seed=args.seed, trials=args.trials)
        else:
            cfg = validate({"experiment": args.command}, seed=args.seed, trials=args.trials)
        if cfg.experiment != args.command:
            raise ConfigError(f"config is for {cfg.experiment!r}, not {args.command!r}")
        man, code = runner.run(cfg, args.out)
    except (ConfigError, TreeError, PRPViolation, SolverError) as exc:
        print(f"bsde-lab: invalid configuration: {exc}", file=sys.stderr)
        return runner.EXIT_CONFIG
    if man.error:
        print(f"bsde-lab: {man.error}", file=sys.stderr)
    status = "pass" if man.passed else "FAIL"
    checks = ", ".join(f"{k}={'pass' if v else 'FAIL'}" for k, v in man.verdicts.items() if isinstance(v, bool))
    print(f"{cfg.experiment}: {status} ({checks}) -> {args.out}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
