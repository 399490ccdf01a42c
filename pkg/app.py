"""
Command-line entry point for the CHIP classification pipeline.

Subcommands:
    synth   write a synthetic phantom cohort (images, manifest, ground truth)
    train   train one model on every patient of a manifest
    cv      grouped k-fold cross-validation plus the full report
    report  rebuild metrics, ROC CSVs and the ROC plot from fold reports

Exit codes: 0 success, 1 usage/config/data/metric error, 2 I/O error,
3 numeric failure during training.
"""
import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Tuple

from config import RUN_CONFIG_FILE, RunConfig, load_run_config, save_run_config, validate_run_config
from services.cv_service import load_fold_reports, run_cv, train_full
from services.data_service import DEFAULT_IMAGE_SIZE, generate_synthetic, load_manifest, summarize_manifest
from services.errors import ChipPipelineError, ConfigError, NumericError
from services.report_service import metrics_line, write_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class CommandLineParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors as ConfigError (exit 1) instead of exiting with 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _common_flags() -> argparse.ArgumentParser:
    common = CommandLineParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides the config file)")
    common.add_argument("--config", default=None, help="JSON run config file")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--jobs", type=int, default=None, help="folds trained in parallel")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")
    return common


def _training_flags() -> argparse.ArgumentParser:
    training = CommandLineParser(add_help=False)
    training.add_argument("--manifest", default=None, help="dataset manifest JSON")
    training.add_argument("--epochs", type=int, default=None)
    training.add_argument("--batch-size", type=int, default=None)
    training.add_argument("--learning-rate", type=float, default=None)
    training.add_argument("--image-size", type=int, default=None)
    training.add_argument("--no-augment", action="store_true", help="disable training-time augmentation")
    return training


def create_parser() -> argparse.ArgumentParser:
    parser = CommandLineParser(prog="chip", description="Multi-view CNN CHIP classification pipeline")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands.required = True
    common = _common_flags()
    training = _training_flags()

    synth = commands.add_parser("synth", parents=[common], help="generate a synthetic phantom cohort")
    synth.add_argument("--patients", type=int, default=82)
    synth.add_argument("--chip-fraction", type=float, default=0.42)
    synth.add_argument("--signal", type=float, default=0.5)
    synth.add_argument("--missing-rate", type=float, default=0.1)
    synth.add_argument("--image-size", type=int, default=DEFAULT_IMAGE_SIZE)
    synth.set_defaults(handler=cmd_synth)

    train = commands.add_parser("train", parents=[common, training], help="train on a whole manifest")
    train.set_defaults(handler=cmd_train)

    cv = commands.add_parser("cv", parents=[common, training], help="grouped k-fold cross-validation")
    cv.add_argument("--k", type=int, default=None, help="number of folds")
    cv.add_argument("--unstratified", action="store_true", help="plain shuffled folds")
    cv.set_defaults(handler=cmd_cv)

    report = commands.add_parser("report", parents=[common], help="rebuild the report from fold reports")
    report.add_argument("--results", default=None, help="directory holding fold_*.json")
    report.set_defaults(handler=cmd_report)
    return parser


def resolve_run_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Config file values (or `base`) with every explicitly given flag on top.
    """
    config = load_run_config(args.config) if args.config else (base or RunConfig())
    if args.seed is not None:
        config = config.with_seed(args.seed)

    train = config.train
    if getattr(args, "epochs", None) is not None:
        train = replace(train, epochs=args.epochs)
    if getattr(args, "batch_size", None) is not None:
        train = replace(train, batch_size=args.batch_size)
    if getattr(args, "learning_rate", None) is not None:
        train = replace(train, learning_rate=args.learning_rate)
    if getattr(args, "no_augment", False):
        train = replace(train, augmentation=train.augmentation.disabled(seed=train.augmentation.seed))
    model = config.model
    if getattr(args, "image_size", None) is not None:
        model = replace(model, image_size=args.image_size)

    config = replace(config, model=model, train=train)
    if getattr(args, "manifest", None):
        config = replace(config, manifest=str(args.manifest))
    if args.out:
        config = replace(config, out_dir=str(args.out))
    if args.jobs is not None:
        config = replace(config, jobs=args.jobs)
    if getattr(args, "k", None) is not None:
        config = replace(config, k=args.k)
    if getattr(args, "unstratified", False):
        config = replace(config, stratified=False)
    validate_run_config(config)
    return config


def cmd_synth(args: argparse.Namespace) -> Tuple[int, str]:
    """
    Write a synthetic cohort.

    Returns:
        tuple: (exit code, summary line)
    """
    if args.patients < 2:
        return EXIT_USAGE, "Need at least 2 patients."
    if not 0.0 < args.chip_fraction < 1.0:
        return EXIT_USAGE, "--chip-fraction must be strictly between 0 and 1."
    if args.signal < 0:
        return EXIT_USAGE, "--signal must be nonnegative."
    if not 0.0 <= args.missing_rate <= 1.0:
        return EXIT_USAGE, "--missing-rate must be within [0, 1]."

    out_dir = Path(args.out or "data")
    manifest = generate_synthetic(
        n_patients=args.patients,
        chip_fraction=args.chip_fraction,
        signal_strength=args.signal,
        missing_view_rate=args.missing_rate,
        seed=args.seed if args.seed is not None else 0,
        out_dir=out_dir,
        image_size=args.image_size,
    )
    counts = summarize_manifest(load_manifest(manifest))
    summary = ", ".join(f"{name}={value}" for name, value in counts.items())
    return EXIT_OK, f"Wrote {manifest}: {summary}"


def cmd_train(args: argparse.Namespace) -> Tuple[int, str]:
    config = resolve_run_config(args, base=RunConfig(out_dir="model"))
    if not config.manifest:
        return EXIT_USAGE, "A manifest is required (--manifest or the config file)."

    save_run_config(config, config.out_dir)
    model, history = train_full(config.manifest, config.train, config.model, config.out_dir)
    final = f", final loss {history[-1]:.6f}" if history else ""
    return EXIT_OK, f"Trained on {len(model.trained_patient_ids)} patients{final}; outputs in {config.out_dir}"


def cmd_cv(args: argparse.Namespace) -> Tuple[int, str]:
    """
    Cross-validate and write fold reports, metrics, ROC CSVs and the ROC plot.

    Returns:
        tuple: (exit code, metrics summary line)
    """
    config = resolve_run_config(args)
    if not config.manifest:
        return EXIT_USAGE, "A manifest is required (--manifest or the config file)."
    if not Path(config.manifest).is_file():
        return EXIT_USAGE, f"Manifest {config.manifest} does not exist."

    save_run_config(config, config.out_dir)
    reports = run_cv(
        config.manifest, config.train, config.model,
        k=config.k, seed=config.seed, out_dir=config.out_dir,
        jobs=config.jobs, stratified=config.stratified,
    )
    summary = write_report(
        reports, config.out_dir,
        image_threshold=config.image_threshold,
        ratio_threshold=config.ratio_threshold,
        max_threshold=config.max_threshold,
    )
    return EXIT_OK, metrics_line(summary.metrics)


def cmd_report(args: argparse.Namespace) -> Tuple[int, str]:
    results = Path(args.results or args.out or "results")
    if not results.is_dir():
        return EXIT_USAGE, f"Results directory {results} does not exist."

    # thresholds default to the ones the cv run recorded
    recorded = results / RUN_CONFIG_FILE
    base = load_run_config(recorded) if recorded.is_file() else RunConfig()
    config = resolve_run_config(args, base=replace(base, out_dir=str(results)))
    reports = load_fold_reports(results)
    summary = write_report(
        reports, config.out_dir,
        image_threshold=config.image_threshold,
        ratio_threshold=config.ratio_threshold,
        max_threshold=config.max_threshold,
    )
    save_run_config(config, config.out_dir)
    return EXIT_OK, metrics_line(summary.metrics)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = create_parser().parse_args(argv)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format=LOG_FORMAT)
    try:
        status, message = args.handler(args)
    except (ChipPipelineError, OSError) as exc:
        status, message = exit_code_for(exc), str(exc)
        logger.debug("%s failed", args.command, exc_info=True)

    print(message, file=sys.stdout if status == EXIT_OK else sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
