"""Command-line entry point: ``echobench <subcommand> [--config ...] [--out ...]``.

Exit status is 0 on success. Failures print a one-line JSON object
(``{"error": ..., "type": ...}``) on stderr and exit with 1 for bad input or
2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import data as data_mod
from .models import ConfigError
from .runner import (GridSpec, RunConfig, emit_plot_data, evaluate_run, load_config_json, parse_data_config,
                     parse_grid_config, parse_run_config, run_experiment, run_grid)


class UsageError(Exception):
    pass


def _apply_overrides(cfg, args):
    if isinstance(cfg, RunConfig):
        if args.seed is not None:
            cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed))
        if args.width_multiplier is not None:
            cfg = replace(cfg, model=replace(cfg.model, width_multiplier=args.width_multiplier).validate())
    elif isinstance(cfg, GridSpec):
        if args.seed is not None:
            cfg.overrides = {**cfg.overrides, "seed": args.seed}
        if args.width_multiplier is not None:
            cfg.width_multiplier = args.width_multiplier
    return cfg


def _require(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")


def cmd_generate_data(args) -> dict:
    _require(args, "config", "out")
    raw = load_config_json(args.config)
    cfg = parse_data_config(raw.get("data", raw))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    clips = data_mod.generate_dataset(cfg.dataset_spec())
    path = data_mod.write_records(clips, args.out)
    return {"records": str(path), "clips": len(clips), "shape": list(clips[0].shape)}


def cmd_train(args) -> dict:
    _require(args, "config", "out")
    cfg = _apply_overrides(parse_run_config(args.config), args)
    art = run_experiment(cfg, args.out)
    return {"run_dir": str(art.directory), "status": art.status,
            "test_rmse": art.test.rmse if art.test else None, "performance_class": art.performance}


def cmd_evaluate(args) -> dict:
    _require(args, "out")
    return evaluate_run(args.out)


def cmd_grid(args) -> dict:
    _require(args, "config", "out")
    grid = _apply_overrides(parse_grid_config(args.config), args)
    return {"summary": str(run_grid(grid, args.out))}


def cmd_emit_plots(args) -> dict:
    _require(args, "out")
    return {k: str(v) for k, v in emit_plot_data(args.out).items()}


COMMANDS = {
    "generate-data": (cmd_generate_data, "write a synthetic clip-record file (--out is the file)"),
    "train": (cmd_train, "run one experiment from a run config into --out"),
    "evaluate": (cmd_evaluate, "recompute split metrics for the run directory --out"),
    "grid": (cmd_grid, "run an ablation grid config into --out"),
    "emit-plots": (cmd_emit_plots, "re-emit plot CSVs for the run directory --out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="echobench", description="Video EF regression experiments on synthetic clips.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--out", type=Path, help="output file or directory")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--width-multiplier", type=float, help="override the channel width multiplier")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "type": "UsageError"}), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = COMMANDS[args.command][0](args)
    except UsageError as exc:
        print(json.dumps({"error": str(exc), "type": "UsageError"}), file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
