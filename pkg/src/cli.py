"""
Command-line entry point for the cloud-cluster detection experiments.

Subcommands:
    comm-prob   cluster communication probability table
    sweep-pcom  loss curves against the sensor communication probability
    sweep-nc    loss curves against the number of equal clusters
    optimize    exact vs bound thresholds and initialization comparison
    simulate    Monte Carlo validation of the optimized homogeneous system
    sweep-init  initialization-scheme comparison over the p_com grid
    config      print or write the canonical form of a config

Exit codes: 0 on success, 2 on a configuration error, 3 on a numeric
domain error.

Usage:
    python -m src.cli sweep-pcom --config configs/default.json --out results/pcom.csv
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import pandas as pd

from src import experiments
from src.detection_core import DomainError
from src.experiment_config import (
    ConfigError,
    ExperimentConfig,
    dump_config,
    dumps_config,
    load_config,
    resolve_threads,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DOMAIN = 3


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    logger.info(f"Saved {len(df)} rows to {path}")
    return path


def _out_path(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output)


def cmd_comm_prob(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    _write_csv(experiments.comm_prob_table(cfg), _out_path(args, cfg))
    return EXIT_OK


def cmd_sweep_pcom(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    _write_csv(experiments.sweep_pcom(cfg, args.threads), _out_path(args, cfg))
    return EXIT_OK


def cmd_sweep_nc(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    _write_csv(experiments.sweep_nc(cfg, args.threads), _out_path(args, cfg))
    return EXIT_OK


def cmd_sweep_init(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    _write_csv(experiments.sweep_init(cfg, args.threads), _out_path(args, cfg))
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    report = experiments.optimize_report(cfg, args.threads)
    out = _write_csv(report.frame, _out_path(args, cfg))
    text_path = out.with_suffix('.txt')
    text_path.write_text(report.text, encoding='utf-8')
    for line in report.text.splitlines():
        logger.info(line)
    logger.info(f"Saved report to {text_path}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    frame = experiments.simulate(cfg, cfg.trials, cfg.seed, args.threads)
    _write_csv(frame, _out_path(args, cfg))
    return EXIT_OK


def cmd_config(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    if args.out:
        dump_config(cfg, args.out)
    else:
        sys.stdout.write(dumps_config(cfg))
    return EXIT_OK


COMMANDS = {
    'comm-prob': (cmd_comm_prob, "Communication probability of a cluster vs its size"),
    'sweep-pcom': (cmd_sweep_pcom, "Loss curves vs sensor communication probability"),
    'sweep-nc': (cmd_sweep_nc, "Loss curves vs number of equal clusters"),
    'optimize': (cmd_optimize, "Threshold optimization report"),
    'simulate': (cmd_simulate, "Monte Carlo validation run"),
    'sweep-init': (cmd_sweep_init, "Initialization-scheme comparison vs p_com"),
    'config': (cmd_config, "Print or write the canonical config"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='cloud-cluster',
        description="Decentralized detection experiments for clustered sensor networks",
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument('--config', type=Path, help='JSON experiment config (defaults if omitted)')
        sub.add_argument('--out', type=Path, help='Output path (overrides the config)')
        sub.add_argument('--seed', type=int, help='Master seed (overrides the config)')
        sub.add_argument('--trials', type=int, help='Monte Carlo trials (overrides the config)')
        sub.add_argument('--threads', type=int,
                         help='Worker threads (overrides config and CLOUD_CLUSTER_THREADS)')
        sub.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides['seed'] = args.seed
    if args.trials is not None:
        overrides['trials'] = args.trials
    if overrides:
        cfg = replace(cfg, **overrides)
    args.threads = resolve_threads(cfg, args.threads)
    return cfg


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
    )
    handler, _ = COMMANDS[args.command]
    try:
        cfg = _load(args)
        logger.info(f"Running {args.command} (seed={cfg.seed}, threads={args.threads})")
        return handler(args, cfg)
    except ConfigError as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except DomainError as e:
        logger.error(f"Numeric domain error: {e}")
        return EXIT_DOMAIN


if __name__ == '__main__':
    sys.exit(main())
