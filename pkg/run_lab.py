"""Command-line entry point: adnet-lab {supervoxel,synth,train,eval,sweep,linesearch}"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from adnet import EmptyMaskError
from checkpoint import CheckpointError
from config import ConfigurationError, LabConfig, LabSettings
from encoder import EncoderError
from episodes import EpisodeSamplingError
from evaluation import EvaluationError
from logging_config import setup_logging
from models import SupervoxelParams
from synthetic import SyntheticDataError
from tensor import NumericsError
from trainer import TrainingError
from volumes import VolumeFormatError, VolumeIOError

logger = logging.getLogger(__name__)

# most specific first; the first matching class names the category
ERROR_CATEGORIES = [
    (ConfigurationError, "config"),
    (VolumeIOError, "io"),
    (CheckpointError, "io"),
    (VolumeFormatError, "data"),
    (SyntheticDataError, "data"),
    (EmptyMaskError, "data"),
    (EncoderError, "data"),
    (NumericsError, "numerics"),
    (EpisodeSamplingError, "sampling"),
    (TrainingError, "training"),
    (EvaluationError, "evaluation"),
    (OSError, "io"),
]


def error_category(error: BaseException) -> str:
    for cls, category in ERROR_CATEGORIES:
        if isinstance(error, cls):
            return category
    return "internal"


def exit_code_for(category: str) -> int:
    return 2 if category == "config" else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment file (JSON or YAML)")
    common.add_argument("--seed", type=int, help="override the experiment seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--threads", type=int, help="worker threads (default ADNET_THREADS or 1)")

    parser = argparse.ArgumentParser(prog="adnet-lab", description="Self-supervised few-shot segmentation lab")
    commands = parser.add_subparsers(dest="command", required=True)

    supervoxel = commands.add_parser("supervoxel", parents=[common], help="pseudo-labels for a volume directory")
    supervoxel.add_argument("--input", required=True, help="directory of RVF volumes")
    supervoxel.add_argument("--rho", type=int, help="minimum supervoxel size")
    supervoxel.add_argument("--scale-k", type=float, help="merge scale k")
    supervoxel.add_argument("--mode", choices=["supervoxel", "superpixel"])

    commands.add_parser("synth", parents=[common], help="write the synthetic dataset")
    commands.add_parser("train", parents=[common], help="cross-validated episodic training")

    evaluate = commands.add_parser("eval", parents=[common], help="EP1/EP2 evaluation of checkpoints")
    evaluate.add_argument("--checkpoint", required=True, help="checkpoint file or training output directory")

    sweep = commands.add_parser("sweep", parents=[common], help="sensitivity table over one parameter")
    sweep.add_argument("--param", required=True, choices=["rho", "kappa", "self_supervision"])
    sweep.add_argument("--values", nargs="*", default=[])

    linesearch = commands.add_parser("linesearch", parents=[common], help="dice over an inference threshold grid")
    linesearch.add_argument("--checkpoint", required=True)
    linesearch.add_argument("--t-min", type=float, default=-20.0)
    linesearch.add_argument("--t-max", type=float, default=-5.0)
    linesearch.add_argument("--t-step", type=float, default=0.5)
    return parser


def run_command(args: argparse.Namespace, config: LabConfig) -> str:
    """Dispatch one parsed command; returns a one-line result summary"""
    from lab_service import LabService

    threads = args.threads or config.settings.threads
    service = LabService(config, Path(args.out), threads=threads)

    if args.command == "synth":
        return f"dataset written: {service.cmd_synth()}"
    if args.command == "supervoxel":
        updates = {k: v for k, v in (("rho", args.rho), ("scale_k", args.scale_k)) if v is not None}
        params = SupervoxelParams(**{**config.experiment.supervoxel.model_dump(), **updates})
        manifest = service.cmd_supervoxel(Path(args.input), params, args.mode)
        return f"{len(manifest.counts)} {manifest.mode} label volumes written to {args.out}"
    if args.command == "train":
        checkpoints = service.cmd_train()
        return f"{len(checkpoints)} checkpoints written to {args.out}"
    if args.command == "eval":
        result = service.cmd_eval(Path(args.checkpoint))
        return f"{result.protocol} mean dice {result.mean:.2f} +- {result.std:.2f} over {result.count} values"
    if args.command == "sweep":
        rows = service.cmd_sweep(args.param, args.values)
        return f"{args.param} sweep: {len(rows)} rows written to {args.out}"
    result = service.cmd_linesearch(Path(args.checkpoint), args.t_min, args.t_max, args.t_step)
    return f"line search: {len(result.points)} thresholds, best {result.best.threshold:.2f} ({result.best.mean:.2f})"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = LabSettings()
        setup_logging(settings.log_level, settings.resolved_log_file)
        config = LabConfig(config_path=args.config, seed=args.seed)
        logger.info(f"=== adnet-lab {args.command} ===")
        summary = run_command(args, config)
    except Exception as e:
        category = error_category(e)
        if category == "internal":
            logger.exception("Unexpected failure:")
        else:
            logger.error(f"❌ {args.command} failed: {e}")
        message = " ".join(str(e).split())
        print(f"error={category} message={message}", file=sys.stderr)
        return exit_code_for(category)

    logger.info(f"✅ {summary}")
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
