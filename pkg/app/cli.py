"""
Command line entry: pretrain, run, sweep, verify.

Exit codes: 0 success, 1 other failure, 2 missing artifact, 3 adaptation-failure storm.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from app.config_manager import ConfigManager
from app.experiment import (SWEEP_AXES, AdaptationStormError, ExperimentConfig, MissingArtifactError,
                            cmd_pretrain, cmd_run, cmd_sweep, cmd_verify)
from app.ood_metrics import OodScore
from app.stream_synth import parse_order

logger = logging.getLogger("DOCO")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING_ARTIFACT = 2
EXIT_STORM = 3


def parse_seeds(text: str) -> List[int]:
    """'3', '0,1,2' or '0-9'."""
    seeds: List[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in '{text}'")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doco", description="Open-set continual test-time adaptation")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (default: $DOCO_CONFIG, config.json, bundled example)")
    common.add_argument("--out", help="Output root (default: $DOCO_OUTPUT_ROOT or paths.output_dir)")
    common.add_argument("--seed", type=parse_seeds, help="Seed, list '0,1,2' or range '0-9'")
    common.add_argument("--kappa", type=float, help="OOD contamination ratio")
    common.add_argument("--severity", type=float, help="Corruption severity")
    common.add_argument("--method", choices=["doco", "source-only"])
    common.add_argument("--ablation", help="Named ablation: full, no-R, no-S, no-O, no-S-O, no-S-O-R")
    common.add_argument("--no-split", action="store_true", help="Adapt on the whole batch")
    common.add_argument("--no-propagate", action="store_true", help="Predict likely-OOD samples with p_t")
    common.add_argument("--no-reg", action="store_true", help="Drop the structural regularizer")
    common.add_argument("--ood-score", choices=[s.value for s in OodScore])
    common.add_argument("--domain-order", help="Permutation of domain indices, e.g. 2,0,3,1")
    common.add_argument("--exclude-first-batch", action="store_true", help="Leave batch 1 out of aggregates")
    common.add_argument("--workers", type=int, help="Parallel runs")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="Pretrain the source model and cache statistics")
    sub.add_parser("run", parents=[common], help="Run one configuration over the given seeds")
    sweep = sub.add_parser("sweep", parents=[common], help="Sweep one axis over the given seeds")
    sweep.add_argument("--axis", required=True, choices=list(SWEEP_AXES))
    verify = sub.add_parser("verify", parents=[common], help="Re-run one results row and compare")
    verify.add_argument("--row", type=int, help="Row index in results.tsv (default: seed-chosen)")
    return parser


def resolve_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Config file first, then command line overrides."""
    cm = ConfigManager.reload(args.config) if args.config else ConfigManager()
    logger.debug(f"Configuration loaded from {cm.path}")
    exp = ExperimentConfig.from_config(cm)
    if args.out:
        exp = replace(exp, output_dir=args.out)

    if args.seed is not None:
        exp = replace(exp, seeds=args.seed)
    if args.kappa is not None:
        exp = exp.with_stream(kappa=args.kappa)
    if args.severity is not None:
        exp = exp.with_stream(severity=args.severity)
    if args.domain_order:
        exp = exp.with_stream(domain_order=parse_order(args.domain_order))
    if args.method:
        exp = replace(exp, method=args.method)
    if args.ood_score:
        exp = replace(exp, ood_score=args.ood_score)
    if args.exclude_first_batch:
        exp = replace(exp, exclude_first_batch=True)
    if args.workers is not None:
        exp = replace(exp, workers=args.workers)

    adapter = exp.adapter
    if args.ablation:
        adapter = adapter.with_ablation(args.ablation)
    if args.no_split:
        adapter = replace(adapter, use_split=False)
    if args.no_propagate:
        adapter = replace(adapter, use_propagate=False)
    if args.no_reg:
        adapter = replace(adapter, use_reg=False)
    return replace(exp, adapter=adapter)


def setup_logging(output_dir: Path):
    output_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(output_dir / "doco.log"),
            logging.StreamHandler()
        ],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = resolve_experiment(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"doco: {e}", file=sys.stderr)
        return EXIT_FAILURE

    setup_logging(exp.output_path)
    try:
        if args.command == "pretrain":
            cmd_pretrain(exp)
        elif args.command == "run":
            cmd_run(exp)
        elif args.command == "sweep":
            cmd_sweep(exp, args.axis)
        elif args.command == "verify":
            if not cmd_verify(exp, args.row):
                return EXIT_FAILURE
    except MissingArtifactError as e:
        logger.error(f"Missing artifact: {e}")
        return EXIT_MISSING_ARTIFACT
    except AdaptationStormError as e:
        logger.error(f"Adaptation failure storm: {e}")
        return EXIT_STORM
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
