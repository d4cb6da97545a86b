#!/usr/bin/env python3
"""
Command-line entry point for the active-learning emitter identifier.

Every subcommand accepts --config FILE plus one flag per ExperimentConfig
field (e.g. --num-emitters 4 or --num_emitters 4); flags override the file,
which overrides the built-in defaults.
"""

import argparse
import asyncio
import sys
from typing import List, Optional

from colorama import Fore, Style, init
from dotenv import load_dotenv

from cli_commands import (compare_cli, pretrain_cli, report_cli, run_cli, select_cli, simulate_cli,
                          sweep_alpha_cli, train_cli)
from experiment_harness import ExperimentConfig, build_config
from query_selectors import STRATEGIES
from utils import ConfigurationError, setup_logging

_FLAG_HELP = {
    "dataset": "'synthetic' or the path of an I/Q dataset file",
    "num_emitters": "number of emitters M",
    "length": "samples per record L",
    "initial_labeled": "initial labeled pool size a",
    "rounds": "number of query rounds R",
    "budget": "records revealed per round K",
    "strategy": f"query strategy, one of {', '.join(STRATEGIES)}",
    "alpha": "joint-loss weight of the contrastive term",
    "seed": "master seed (required for run)",
    "angles": "comma-separated rotation angles, e.g. 0.5pi,pi",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("experiment configuration")
    group.add_argument("--config", help="flat KEY=value config file")
    for name in ExperimentConfig.field_names():
        flags = [f"--{name.replace('_', '-')}"]
        if "_" in name:
            flags.append(f"--{name}")
        group.add_argument(*flags, dest=name, default=None, metavar="VALUE", help=_FLAG_HELP.get(name))


def _parse_list(text: str, cast) -> List:
    try:
        return [cast(t.strip()) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigurationError(f"invalid list {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Active-learning specific emitter identification")
    sub = parser.add_subparsers(dest="command", required=True)

    simulate = sub.add_parser("simulate", help="Simulate emitters and write an I/Q dataset file")
    simulate.add_argument("--output", required=True, help="dataset file to write")
    simulate.add_argument("--sample-rate", type=float, default=1.0, help="sample rate stored in the header")

    pretrain = sub.add_parser("pretrain", help="Stage 1 contrastive pretraining to a checkpoint")
    pretrain.add_argument("--output", required=True, help="checkpoint file to write")

    train = sub.add_parser("train", help="Stage 2 fine-tuning on the labeled pool")
    train.add_argument("--checkpoint", help="start from this checkpoint instead of fresh weights")
    train.add_argument("--output", required=True, help="checkpoint file to write")

    select = sub.add_parser("select", help="Pick K unlabeled records with a trained checkpoint")
    select.add_argument("--checkpoint", required=True, help="trained checkpoint")
    select.add_argument("--output", required=True, help="selection CSV to write")

    run = sub.add_parser("run", help="Full experiment across all AL rounds")
    run.add_argument("--run-dir", help="run directory (default: under $SEI_RUNS_DIR)")
    run.add_argument("--baseline", action="store_true", help="plain CNN: CE only, random selection, no pretraining")

    report = sub.add_parser("report", help="Aggregate run directories into curve CSVs")
    report.add_argument("path", help="a run directory or a directory of runs")

    compare = sub.add_parser("compare", help="Run strategies x seeds concurrently and compare")
    compare.add_argument("--strategies", default="bald,kcenter", help="comma-separated strategies")
    compare.add_argument("--seeds", default="0", help="comma-separated seeds")
    compare.add_argument("--no-baseline", action="store_true", help="skip the plain CNN baseline")
    compare.add_argument("--runs-dir", help="parent directory for the run directories")
    compare.add_argument("--workers", type=int, help="worker processes")

    sweep = sub.add_parser("sweep-alpha", help="Run the joint-loss weight sweep")
    sweep.add_argument("--alphas", default="0,0.1,0.5,1.0", help="comma-separated alpha values")
    sweep.add_argument("--seeds", default="0", help="comma-separated seeds")
    sweep.add_argument("--runs-dir", help="parent directory for the run directories")
    sweep.add_argument("--workers", type=int, help="worker processes")

    for name, subparser in sub.choices.items():
        if name != "report":
            _add_config_flags(subparser)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, build the configuration and dispatch the subcommand."""
    load_dotenv()
    init()
    setup_logging()
    args = build_parser().parse_args(argv)

    if args.command == "report":
        return report_cli(args.path)

    overrides = {name: getattr(args, name) for name in ExperimentConfig.field_names()}
    try:
        config = build_config(args.config, overrides)
        if args.command in ("compare", "sweep-alpha"):
            seeds = _parse_list(args.seeds, int)
            values = _parse_list(args.strategies, str) if args.command == "compare" else _parse_list(args.alphas, float)
    except ConfigurationError as e:
        print(Fore.RED + f"ERROR: {e}" + Style.RESET_ALL)
        return 1

    try:
        if args.command == "simulate":
            return simulate_cli(config, args.output, args.sample_rate)
        if args.command == "pretrain":
            return pretrain_cli(config, args.output)
        if args.command == "train":
            return train_cli(config, args.checkpoint, args.output)
        if args.command == "select":
            return select_cli(config, args.checkpoint, args.output)
        if args.command == "run":
            return run_cli(config, args.run_dir, args.baseline)
        if args.command == "compare":
            return asyncio.run(compare_cli(config, values, seeds, not args.no_baseline, args.runs_dir, args.workers))
        return asyncio.run(sweep_alpha_cli(config, values, seeds, args.runs_dir, args.workers))
    except KeyboardInterrupt:
        print("\nOperation cancelled.")
        return 130


if __name__ == "__main__":
    sys.exit(main())
