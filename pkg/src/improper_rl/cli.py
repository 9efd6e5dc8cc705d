"""Command-line entry point: ``improper-rl <experiment> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import EXPERIMENTS, ExperimentConfig, _jsonable, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="improper-rl",
                                description="Policy gradient over mixtures of base controllers: experiments and checks.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--algorithm", choices=("exact-pg", "spge", "alg2"))
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--workers", type=int)
    p.add_argument("--check", action="store_true", help="evaluate the attached assertions and set the exit code")
    p.add_argument("--param", action="append", default=[], metavar="KEY=JSON",
                   help="override one experiment parameter, e.g. --param arrival_rates=[0.3,0.6]")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    data: dict = {"experiment": args.experiment}
    if args.config is not None:
        data.update(json.loads(args.config.read_text()))
        data["experiment"] = args.experiment
    for key in ("seed", "trials", "rounds", "algorithm", "workers"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    params = dict(data.get("params", {}))
    for item in args.param:
        key, _, raw = item.partition("=")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    data["params"] = params
    try:
        cfg = ExperimentConfig(**data)
        record = run_experiment(cfg, args.out)
    except (ValueError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(_jsonable(record.summary), indent=2, sort_keys=True))
    for trial, err in record.errors.items():
        print(f"trial {trial} failed: {err}", file=sys.stderr)
    for name, ok in record.checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {args.out}/{cfg.experiment}.csv and {cfg.experiment}_agg.csv")
    if args.check:
        return 0 if record.passed else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
