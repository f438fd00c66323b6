"""``mono-split`` command line: run a config, reproduce a table, validate an instance."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import GeneratorError, load_instance
from .harness import ConfigError, build_preset, load_config, run_experiment, run_preset
from .solvers import ConfigurationError
from .validation import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_PROPERTY = 0, 2, 3, 4


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        outcome = run_experiment(config, args.out, args.jobs)
    except (ConfigError, ConfigurationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for r in outcome.results:
        if r.diverged:
            print(f"warning: {r.solver} trial {r.trial} diverged: {r.message}", file=sys.stderr)
    print(f"wrote {outcome.output_dir / 'aggregate.csv'}")
    return EXIT_DIVERGED if outcome.all_diverged else EXIT_OK


def cmd_reproduce(args) -> int:
    try:
        out = args.out or f"results/{args.table}"
        trace_dir = None
        if args.traces:
            trace_dir = Path(out) / "traces"
            trace_dir.mkdir(parents=True, exist_ok=True)
        preset = build_preset(args.table, args.scale, args.seed, args.J, args.trials,
                              args.residual, trace_dir=trace_dir)
        outcome = run_preset(preset, out, args.jobs, args.seed)
    except (ConfigError, ConfigurationError, GeneratorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print((outcome.output_dir / f"{args.table}.txt").read_text(encoding="utf-8"))
    return EXIT_DIVERGED if outcome.all_diverged else EXIT_OK


def cmd_validate(args) -> int:
    try:
        problem = load_instance(args.instance)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, GeneratorError) as exc:
        print(f"config error: cannot load instance: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    results = run_suite(problem, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mono-split", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every solver x trial of a config file")
    run.add_argument("config")
    run.add_argument("--out", default=None, help="override output_dir")
    run.add_argument("--jobs", type=int, default=None)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("reproduce", help="rerun a benchmark table preset")
    rep.add_argument("table", choices=("table2", "table3", "table4"))
    rep.add_argument("--scale", type=float, default=1.0, help="budget multiplier in (0, 1]")
    rep.add_argument("--out", default=None)
    rep.add_argument("--jobs", type=int, default=None)
    rep.add_argument("--seed", type=int, default=0, help="seed base; trial i uses seed + i")
    rep.add_argument("--J", type=int, default=20, help="number of players")
    rep.add_argument("--trials", type=int, default=20)
    rep.add_argument("--residual", choices=("common", "scheme"), default="common",
                     help="residual step: 1/(4L) for every scheme, or each scheme's own step")
    rep.add_argument("--traces", action="store_true", help="also write per-trial trace CSVs")
    rep.set_defaults(func=cmd_reproduce)

    val = sub.add_parser("validate", help="check the standing assumptions on an instance")
    val.add_argument("instance")
    val.add_argument("--seed", type=int, default=0)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
