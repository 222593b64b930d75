"""Command line entry point: ``phs-split run [config.json] [overrides]``.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from phsplit.experiments import RUNNERS, ConfigError, ExperimentConfig, default_system
from phsplit.integrators import StepFailure
from phsplit.splitting import IntegrationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phs-split", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("config", nargs="?", help="JSON config file (defaults apply when omitted)")
    run.add_argument("--experiment", choices=sorted(RUNNERS))
    run.add_argument("--system", help="benchmark name (two_mass, msd_chain) or path to a system JSON")
    run.add_argument("--h", type=float, help="step size")
    run.add_argument("--t-end", type=float, dest="t_end")
    run.add_argument("--solver", choices=["direct", "gmres", "cayley_arnoldi"])
    run.add_argument("--seed", type=int)
    run.add_argument("--out", dest="output_dir")
    run.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    if args.experiment:
        doc["experiment"] = args.experiment
    if args.system:
        path = Path(args.system)
        doc["system"] = {"file": str(path)} if path.suffix == ".json" else {"name": args.system}
    for key in ("h", "t_end", "seed", "output_dir"):
        val = getattr(args, key)
        if val is not None:
            doc[key] = val
    if args.solver:
        solver = doc.get("solver", {})
        solver = dict(solver) if isinstance(solver, dict) else {}
        solver["name"] = args.solver
        doc["solver"] = solver
    doc.setdefault("experiment", "simulate")
    doc.setdefault("system", default_system(doc["experiment"]))
    return ExperimentConfig.from_dict(doc)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        result = RUNNERS[cfg.experiment](cfg)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, StepFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if result.get("failed"):
        return EXIT_NUMERIC
    print(f"{cfg.experiment}: outputs written to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
