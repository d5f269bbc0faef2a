"""quasiflow command line: one subcommand per experiment plus ``submit`` for the worker queue.

Exit statuses: 0 every verdict passes, 1 some verdict failed or was inconclusive,
2 configuration error, 3 hypothesis failure without --force, 4 engine error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import Sequence

from dotenv import load_dotenv

from engine.errors import QuasiFlowError
from engine.settings import inline_fallback_enabled, resolve_log_level
from experiment_config import EXPERIMENTS, ExperimentConfig, load_config
from experiment_queue import enqueue_experiment
from experiment_runner import run_experiment

LOGGER = logging.getLogger("quasiflow")

ENGINE_ERROR_STATUS = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quasiflow", description="Quasi-derivative and random-horizon BSDE experiments.")
    commands = parser.add_subparsers(dest="command", required=True)
    for name in (*EXPERIMENTS, "submit"):
        sub = commands.add_parser(name)
        sub.add_argument("--config", required=True, help="experiment config (JSON)")
        sub.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sub.add_argument("--force", action="store_true", help="continue past failed hypothesis checks")
        sub.add_argument("--out", default=None, help="overrides the config output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    config = load_config(args.config)
    if args.command in EXPERIMENTS and args.command != config.experiment:
        LOGGER.info("config declares %s; running %s as requested", config.experiment, args.command)
        config = dataclasses.replace(config, experiment=args.command)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out:
        config = config.with_output(args.out)
    return config


def _submit(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if enqueue_experiment(args.config, seed=args.seed, force=args.force, output=args.out):
        print(f"queued {config.experiment} from {args.config}")
        return 0
    if inline_fallback_enabled():
        LOGGER.warning("queue unavailable; running %s inline", config.experiment)
        return _run(config, args.force)
    LOGGER.error("queue unavailable and inline fallback disabled")
    return ENGINE_ERROR_STATUS


def _run(config: ExperimentConfig, force: bool) -> int:
    result = run_experiment(config, force=force)
    for line in result.summary:
        print(line)
    print(f"reports: {result.run_dir}")
    return result.exit_status


def main(argv: Sequence[str] | None = None) -> int:
    load_dotenv()
    logging.basicConfig(level=resolve_log_level(), format="%(asctime)s %(levelname)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "submit":
            return _submit(args)
        return _run(resolve_config(args), args.force)
    except QuasiFlowError as exc:
        if exc.exit_status == ENGINE_ERROR_STATUS:
            LOGGER.exception("%s failed: %s", args.command, exc)
        else:
            LOGGER.error("%s: %s %s", exc.error_code, exc, exc.details)
        return exc.exit_status
    except Exception:
        LOGGER.exception("%s failed unexpectedly", args.command)
        return ENGINE_ERROR_STATUS


if __name__ == "__main__":
    sys.exit(main())
