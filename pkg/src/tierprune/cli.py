"""Command-line interface: run one experiment, sweep an axis, re-emit reports.

Exit codes: 0 success; 2 bad arguments or config; 3-9 pipeline failure
coded by stage (data, personalize, pretrain, probe, prune, evaluate,
report); 10 sweep finished but some cells failed.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, StageError, TierPruneError
from .harness import (
    SWEEP_AXES,
    TIER_LABELS,
    ExperimentConfig,
    emit_report,
    load_config,
    load_report,
    run_experiment,
    sweep,
)
from .probe import GENERIC, OTHER, PERSONALIZED

STAGE_EXIT_CODES = {
    "config": 2,
    "data": 3,
    "personalize": 4,
    "pretrain": 5,
    "probe": 6,
    "prune": 7,
    "evaluate": 8,
    "report": 9,
}

EXIT_SWEEP_CELL_FAILED = 10


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected true/false, got {text!r}")


_AXIS_PARSERS = {
    "prune_rate": float,
    "random_number": int,
    "criterion": lambda text: text.strip(),
    "prune_personalized": _parse_bool,
}


def parse_axis_values(axis: str, text: str) -> list:
    if axis not in _AXIS_PARSERS:
        raise ConfigError(f"axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    parts = [part for part in (p.strip() for p in text.split(",")) if part]
    if not parts:
        raise ConfigError("--values needs at least one comma-separated value")
    parse = _AXIS_PARSERS[axis]
    try:
        return [parse(part) for part in parts]
    except ValueError as err:
        raise ConfigError(f"bad value for axis {axis!r}: {err}") from err


def _load(path, seed, out) -> ExperimentConfig:
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out_dir"] = out
    try:
        return load_config(path, **overrides)
    except (TierPruneError, OSError, ValueError) as err:
        raise StageError("config", err) from err


def _summary_line(report) -> str:
    counts = report.tier_counts
    return (
        f"compression {100 * report.final_compression:.1f}%  "
        f"accuracy {100 * report.final_accuracy:.1f}%  "
        f"(baseline {100 * report.baseline_accuracy:.1f}%)  tiers "
        f"{TIER_LABELS[PERSONALIZED]}={counts[PERSONALIZED]} "
        f"{TIER_LABELS[GENERIC]}={counts[GENERIC]} "
        f"{TIER_LABELS[OTHER]}={counts[OTHER]}"
    )


def cmd_run(args) -> int:
    config = _load(args.config, args.seed, args.out)
    report = run_experiment(config)
    print(_summary_line(report))
    if config.out_dir:
        print(f"artifacts: {config.out_dir}")
    return 0


def cmd_sweep(args) -> int:
    values = parse_axis_values(args.axis, args.values)
    config = _load(args.config, args.seed, args.out)
    results = sweep(config, args.axis, values)
    failures = 0
    for cell in results:
        if cell["status"] == "ok":
            print(f"{args.axis}={cell['value']}: {_summary_line(cell['report'])}")
        else:
            failures += 1
            print(f"{args.axis}={cell['value']}: failed: {cell['error']}")
    if config.out_dir:
        print(f"sweep table: {os.path.join(config.out_dir, 'sweep.csv')}")
    return EXIT_SWEEP_CELL_FAILED if failures else 0


def cmd_report(args) -> int:
    try:
        report = load_report(args.run_dir)
        paths = emit_report(report, args.format, args.run_dir)
    except (TierPruneError, OSError) as err:
        raise StageError("report", err) from err
    for path in paths:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tierprune",
        description="Tiered ablation-guided pruning for small vision transformers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to a JSON config file")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="override the output directory")
    run_p.set_defaults(func=cmd_run)

    sweep_p = sub.add_parser("sweep", help="one run per value along a config axis")
    sweep_p.add_argument("--config", required=True, help="path to a JSON config file")
    sweep_p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sweep_p.add_argument("--values", required=True, help="comma-separated axis values")
    sweep_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sweep_p.add_argument("--out", default=None, help="override the output directory")
    sweep_p.set_defaults(func=cmd_sweep)

    report_p = sub.add_parser("report", help="re-emit report files from a run directory")
    report_p.add_argument("--in", dest="run_dir", required=True,
                          help="run directory containing report.json")
    report_p.add_argument("--format", required=True, choices=("csv", "json"))
    report_p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as err:
        print(f"tierprune: {err}", file=sys.stderr)
        return STAGE_EXIT_CODES.get(err.stage, 1)
    except TierPruneError as err:
        print(f"tierprune: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
