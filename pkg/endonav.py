#!/usr/bin/env python3
"""
EndoNav - Autonomous guidewire navigation testbed

Subcommands:
- gen-anatomy  Generate (or import) anatomies and the train/hold-out split
- pretrain     Single-task SAC per task and the shared replay prefill
- train        Multi-task SAC or TD-MPC2 on the prefilled buffer
- eval         Hold-out evaluation with paired t-tests between agents
- ablate-aug   Train/evaluate with and without anatomy augmentation
- report       Render an existing report and re-emit it as csv
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from evalharness import load_report, render_report, write_report
from pipeline import (
    ALGOS,
    ConfigError,
    RunConfig,
    RunManifest,
    StageError,
    cmd_ablate_augmentation,
    cmd_eval,
    cmd_gen_anatomy,
    cmd_pretrain,
    cmd_train,
    show_manifest,
)
from ui import console, error, section_header, setup_logging, success

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='EndoNav - Autonomous endovascular navigation testbed',
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        '-c', '--config',
        type=Path,
        help='JSON run configuration (defaults are used when omitted)'
    )
    parser.add_argument(
        '-o', '--out-dir',
        type=str,
        help='Override the run directory from the config'
    )
    parser.add_argument(
        '--seed',
        type=int,
        help='Override the seed (ENDONAV_SEED also works)'
    )
    parser.add_argument(
        '--full-profile',
        action='store_true',
        help='Start from the full-scale budgets instead of the desk defaults'
    )
    parser.add_argument(
        '-v', '--verbose',
        action='store_true',
        help='Debug logging'
    )
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-anatomy', help='Generate anatomies and the train/hold-out split')
    gen.add_argument('--count', type=int, help='Number of anatomies (overrides config)')
    gen.add_argument('--holdout', type=int, help='Number of hold-out anatomies (overrides config)')

    sub.add_parser('pretrain', help='Single-task SAC agents and the replay prefill')

    train = sub.add_parser('train', help='Multi-task training on the prefilled buffer')
    train.add_argument('--algo', choices=ALGOS, required=True, help='Agent to train')
    train.add_argument('--steps', type=int, help='Exploration step budget (overrides config)')

    ev = sub.add_parser('eval', help='Evaluate checkpoints on the hold-out anatomies')
    ev.add_argument(
        '--checkpoint', action='append', default=None, metavar='NAME=PATH',
        help='Checkpoint to evaluate (repeatable; default: every trained agent in the run)'
    )
    ev.add_argument('--episodes', type=int, help='Episodes per task and anatomy')
    ev.add_argument('--parallel', type=int, help='Evaluation worker threads')

    ablate = sub.add_parser('ablate-aug', help='Augmentation on/off comparison')
    ablate.add_argument('--algo', choices=ALGOS, default='tdmpc2')

    report = sub.add_parser('report', help='Render a json report and re-emit it')
    report.add_argument('report', type=Path, help='report.json produced by eval or ablate-aug')
    report.add_argument('--csv', type=Path, help='Write the table rows to this csv file')

    sub.add_parser('status', help='Show the run manifest')
    return parser


def _parse_checkpoints(values: Optional[List[str]]):
    if not values:
        return None
    checkpoints = {}
    for value in values:
        name, sep, path = value.partition('=')
        if not sep or not name or not path:
            raise ConfigError(f"--checkpoint expects NAME=PATH, got '{value}'")
        checkpoints[name] = Path(path)
    return checkpoints


def load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config, base=RunConfig.full_profile() if args.full_profile else None)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.seed is not None:
        cfg.seed = args.seed
    if args.command == 'gen-anatomy':
        if args.count is not None:
            cfg.anatomy.count = args.count
        if args.holdout is not None:
            cfg.anatomy.holdout = args.holdout
    if args.command == 'train' and args.steps is not None:
        cfg.stages.train_steps = args.steps
    if args.command == 'eval':
        if args.episodes is not None:
            cfg.stages.eval_episodes = args.episodes
        if args.parallel is not None:
            cfg.parallel = args.parallel
    return cfg.validate()


def run(args: argparse.Namespace) -> int:
    if args.command == 'report':
        report = load_report(args.report)
        console.print(render_report(report, title=str(args.report)))
        if args.csv:
            write_report(report, args.csv, 'csv')
            success(f"Wrote {args.csv}")
        return EXIT_OK

    cfg = load_config(args)
    if args.command == 'status':
        show_manifest(RunManifest.read(cfg.out))
        return EXIT_OK

    manifest = RunManifest.open(cfg)
    section_header(f"EndoNav {args.command}", f"run {cfg.out}  seed {cfg.seed}")
    if args.command == 'gen-anatomy':
        cmd_gen_anatomy(cfg, manifest)
    elif args.command == 'pretrain':
        path = cmd_pretrain(cfg, manifest)
        success(f"Prefill replay: {path}")
    elif args.command == 'train':
        path = cmd_train(cfg, manifest, args.algo)
        success(f"Checkpoint: {path}")
    elif args.command == 'eval':
        report = cmd_eval(cfg, manifest, _parse_checkpoints(args.checkpoint))
        console.print(render_report(report))
    elif args.command == 'ablate-aug':
        report = cmd_ablate_augmentation(cfg, manifest, args.algo)
        console.print(render_report(report, title="Augmentation ablation"))
    show_manifest(manifest)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose)
    try:
        return run(args)
    except ConfigError as e:
        error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        error(str(e))
        return EXIT_STAGE
    except (OSError, ValueError) as e:
        # Errors raised outside a stage context (report loading, manifest reads)
        logger.debug("command failed", exc_info=True)
        error(f"{type(e).__name__}: {e}")
        return EXIT_STAGE
    except KeyboardInterrupt:
        error("Interrupted")
        return EXIT_STAGE


if __name__ == '__main__':
    sys.exit(main())
