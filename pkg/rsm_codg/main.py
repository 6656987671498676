"""
Main entry point for rsm-codg.

This module provides the command-line interface: synthetic data generation,
LOSO and single-split training, gradient checking, artifact exports, mask
and topology dumps, the calibration oracle and timing runs.
"""

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .config_manager import ConfigurationError, ConfigurationManager
from .data_storage import (CONFUSION, load_config_echo, load_fold_reports, write_confusion_csv, write_mask_csv,
                           write_spatial_attention_csv)
from .dataio import DatasetFormatError, load_dataset, save_dataset, synthesize
from .logging_config import setup_logging
from .models import Dataset
from .mstt import build_local_mask, build_sparse_mask
from .optim import NumericalError

logger = logging.getLogger(__name__)

EXPORT_DIR = "exports"
ABLATIONS = ("no_align", "no_rgrm", "no_mstt", "no_codg", "no_mmd", "no_contrast", "no_orth")

# argparse dest -> dotted configuration key
TRAINING_FLAGS = {
    "data": "data.path",
    "output": "output.directory",
    "seed": "training.seed",
    "epochs": "training.epochs",
    "batch_size": "training.batch_size",
    "lr": "training.lr",
    "align_lr_scale": "training.align_lr_scale",
    "patience": "training.patience",
    "noise_std": "training.noise_std",
    "val_fraction": "training.val_fraction",
    "fold_workers": "training.fold_workers",
    "hidden": "model.hidden",
    "heads": "model.heads",
    "local_window": "model.local_window",
    "sparse_period": "model.sparse_period",
    "precision": "model.precision",
    "lambda_contrast": "loss.contrast",
    "lambda_orth": "loss.orth",
    "lambda_mmd": "loss.mmd",
    "lambda_align": "loss.align",
    "temperature": "loss.temperature",
    "log_level": "logging.level",
    "log_file": "logging.file",
}

SYNTH_FLAGS = {
    "subjects": "synth.subjects",
    "classes": "synth.classes",
    "per_subject": "synth.per_subject",
    "window": "synth.window",
    "snr": "synth.snr",
    "shift": "synth.shift",
    "synth_seed": "synth.seed",
    "log_level": "logging.level",
    "log_file": "logging.file",
}


def validate_positive_int(value: str) -> int:
    """
    Validate positive integer values.

    Raises:
        argparse.ArgumentTypeError: If value is not a positive integer
    """
    try:
        int_value = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid integer value: {value}")
    if int_value <= 0:
        raise argparse.ArgumentTypeError(f"Value must be positive, got {int_value}")
    return int_value


def validate_non_negative_int(value: str) -> int:
    try:
        int_value = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid integer value: {value}")
    if int_value < 0:
        raise argparse.ArgumentTypeError(f"Value must be non-negative, got {int_value}")
    return int_value


def validate_positive_float(value: str) -> float:
    """Positive float; ``inf`` is accepted (noise-free generator)."""
    try:
        float_value = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid number: {value}")
    if not float_value > 0:
        raise argparse.ArgumentTypeError(f"Value must be positive, got {value}")
    return float_value


def validate_non_negative_float(value: str) -> float:
    try:
        float_value = float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"Invalid number: {value}")
    if not float_value >= 0 or not np.isfinite(float_value):
        raise argparse.ArgumentTypeError(f"Value must be a finite non-negative number, got {value}")
    return float_value


def _logging_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    logging_group = parent.add_argument_group('Logging Options')
    logging_group.add_argument(
        '--log-level', '-l',
        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'],
        help='Logging level (default: from configuration, INFO)'
    )
    logging_group.add_argument('--log-file', type=str, metavar='PATH', help='Log file path (default: console only)')
    return parent


def _run_parent() -> argparse.ArgumentParser:
    """Options shared by every command that trains or reads a configuration."""
    parent = argparse.ArgumentParser(add_help=False)
    config_group = parent.add_argument_group('Configuration Options')
    config_group.add_argument('--config', '-c', type=str, metavar='PATH',
                              help='Configuration file (YAML, JSON or flat section.key = value)')
    config_group.add_argument('--data', '-d', type=str, metavar='PATH',
                              help='Dataset container (default: synthesize from the synth section)')
    config_group.add_argument('--output', '-o', type=str, metavar='DIR', help='Run output directory')
    config_group.add_argument('--seed', type=validate_non_negative_int, help='Training seed (overrides RSMC_SEED)')
    config_group.add_argument('--no-checkpoints', action='store_true', help='Do not write fold checkpoints')

    model_group = parent.add_argument_group('Model Options')
    model_group.add_argument('--hidden', type=validate_positive_int, metavar='H', help='Hidden width H')
    model_group.add_argument('--heads', type=validate_positive_int, metavar='N', help='Attention heads (d_k = H / N)')
    model_group.add_argument('--local-window', type=validate_non_negative_int, metavar='W',
                             help='Local temporal mask radius w')
    model_group.add_argument('--sparse-period', type=validate_positive_int, metavar='P',
                             help='Sparse temporal mask period p (default: max(1, T // 4))')
    model_group.add_argument('--untied', action='store_true', help='Separate weights for the two temporal branches')
    model_group.add_argument('--precision', type=int, choices=[32, 64], help='Parameter precision in bits')

    training_group = parent.add_argument_group('Training Options')
    training_group.add_argument('--epochs', type=validate_positive_int, help='Maximum epochs per fold')
    training_group.add_argument('--batch-size', type=validate_positive_int, help='Windows per subject per iteration')
    training_group.add_argument('--lr', type=validate_positive_float, help='Base learning rate')
    training_group.add_argument('--align-lr-scale', type=validate_positive_float, metavar='S',
                                help='Learning-rate multiplier for the alignment matrices')
    training_group.add_argument('--patience', type=validate_non_negative_int, help='Early-stopping patience')
    training_group.add_argument('--noise-std', type=validate_non_negative_float, help='Input noise sigma')
    training_group.add_argument('--val-fraction', type=validate_non_negative_float,
                                help='Validation share of each (subject, class) cell')
    training_group.add_argument('--fold-workers', type=validate_positive_int, metavar='K',
                                help='Folds trained in parallel worker processes')

    loss_group = parent.add_argument_group('Loss Options')
    loss_group.add_argument('--lambda-contrast', type=validate_non_negative_float, help='Contrastive loss weight')
    loss_group.add_argument('--lambda-orth', type=validate_non_negative_float, help='Orthogonality loss weight')
    loss_group.add_argument('--lambda-mmd', type=validate_non_negative_float, help='MMD loss weight')
    loss_group.add_argument('--lambda-align', type=validate_non_negative_float,
                            help='Weight of the alignment distance-from-identity penalty')
    loss_group.add_argument('--temperature', type=validate_positive_float, help='Contrastive temperature')

    ablation_group = parent.add_argument_group('Ablation Options')
    for name in ABLATIONS:
        ablation_group.add_argument(f"--{name.replace('_', '-')}", dest=name, action='store_true',
                                    help=f"Enable the {name} ablation")
    return parent


def create_argument_parser() -> argparse.ArgumentParser:
    """Create and configure the command-line argument parser."""
    parser = argparse.ArgumentParser(
        prog='rsm-codg',
        description="RSM-CoDG - region-aware spatial and multi-scale temporal attention with "
                    "domain-generalisation losses for cross-subject EEG emotion recognition",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a synthetic six-subject dataset
  rsm-codg synth --subjects 6 --classes 3 --per-subject 200 --T 10 --seed 7 -o data/synth.rsmc

  # Full LOSO run with the desk-scale profile
  rsm-codg loso --config config/desk_scale.cfg --data data/synth.rsmc -o runs/full

  # Ablation without the domain-generalisation losses, four folds in parallel
  rsm-codg loso --config config/desk_scale.cfg --no-codg --fold-workers 4 -o runs/no_codg

  # Finite-difference check of the full network
  rsm-codg gradcheck --samples 50

  # Row-normalised confusion matrices of a finished run
  rsm-codg export confusion --run runs/full

Exit codes:
  0 success, 2 usage/configuration/missing artifact, 3 numerical failure.
        """
    )
    parser.add_argument('--version', action='version', version=f'rsm-codg {__version__}')
    subparsers = parser.add_subparsers(dest='command', metavar='COMMAND')
    subparsers.required = True
    logging_parent = _logging_parent()
    run_parent = _run_parent()

    synth = subparsers.add_parser('synth', parents=[logging_parent], help='Write a synthetic dataset container')
    synth.add_argument('--config', '-c', type=str, metavar='PATH', help='Configuration file (synth section)')
    synth.add_argument('--subjects', type=validate_positive_int, help='Number of subjects S')
    synth.add_argument('--classes', type=validate_positive_int, help='Number of classes C')
    synth.add_argument('--per-subject', type=validate_positive_int, help='Windows per subject')
    synth.add_argument('--T', dest='window', type=validate_positive_int, help='Window length T')
    synth.add_argument('--snr', type=validate_positive_float, help='Signal-to-noise ratio (inf for no noise)')
    synth.add_argument('--shift', type=validate_non_negative_float, help='Inter-subject mixing strength')
    synth.add_argument('--seed', dest='synth_seed', type=validate_non_negative_int, help='Generator seed')
    synth.add_argument('--output', '-o', type=str, metavar='PATH', required=True, help='Container file to write')

    subparsers.add_parser('loso', parents=[run_parent, logging_parent], help='Leave-one-subject-out evaluation')

    train = subparsers.add_parser('train', parents=[run_parent, logging_parent],
                                  help='Single split: hold out one subject')
    train.add_argument('--test-subject', type=validate_non_negative_int, required=True, help='Held-out subject id')

    gradcheck = subparsers.add_parser('gradcheck', parents=[logging_parent],
                                      help='Finite-difference check of the full 64-bit network')
    gradcheck.add_argument('--samples', type=validate_positive_int, default=50,
                           help='Parameter coordinates to check (default: 50)')
    gradcheck.add_argument('--seed', type=validate_non_negative_int, default=3, help='Coordinate sampling seed (default: 3)')
    gradcheck.add_argument('--T', dest='window', type=validate_positive_int, default=4, help='Window length (default: 4)')
    gradcheck.add_argument('--dropout', type=validate_non_negative_float, default=0.0,
                           help='Classifier dropout; any value above 0 is refused')
    gradcheck.add_argument('--tolerance', type=validate_positive_float, default=1e-4,
                           help='Largest accepted relative error (default: 1e-4)')

    export = subparsers.add_parser('export', parents=[logging_parent], help='CSV exports of a finished run')
    export.add_argument('kind', choices=['masks', 'spatial-attention', 'confusion'], help='What to export')
    export.add_argument('--run', type=str, metavar='DIR', required=True, help='Run directory')
    export.add_argument('--data', '-d', type=str, metavar='PATH',
                        help='Dataset container (default: the one recorded in the run)')

    dump_masks = subparsers.add_parser('dump-masks', parents=[logging_parent], help='Print temporal masks as 0/1 CSV')
    dump_masks.add_argument('--T', dest='window', type=validate_positive_int, required=True, help='Window length T')
    dump_masks.add_argument('--w', dest='radius', type=validate_non_negative_int, required=True,
                            help='Local mask radius')
    dump_masks.add_argument('--p', dest='period', type=validate_positive_int, required=True, help='Sparse period')
    dump_masks.add_argument('--output-dir', type=str, metavar='DIR', help='Write local_mask.csv and sparse_mask.csv')

    topology = subparsers.add_parser('topology', parents=[logging_parent], help='Electrode topology tools')
    topology.add_argument('action', choices=['dump'], help='dump: (label, region) CSV of the partition')
    topology.add_argument('--output', '-o', type=str, metavar='PATH', help='File to write (default: stdout)')

    oracle = subparsers.add_parser('oracle', parents=[run_parent, logging_parent],
                                   help='Logistic-regression LOSO oracle on the dataset')
    oracle.add_argument('--calibrate', action='store_true',
                        help='Search the generator shift grid for an oracle accuracy of 45-70%%')

    timing = subparsers.add_parser('timing', parents=[run_parent, logging_parent],
                                   help='Mean epoch wall time and inference latency on one fold')
    timing.add_argument('--test-subject', type=validate_non_negative_int, help='Held-out subject (default: first)')

    return parser


def build_config_manager(args: argparse.Namespace, flags: Dict[str, str],
                         environ: Optional[Dict[str, str]] = None) -> ConfigurationManager:
    """
    Defaults < config file < RSMC_SEED < command-line flags.

    Raises:
        ConfigurationError: On unknown keys or invalid values
    """
    config_manager = ConfigurationManager(getattr(args, 'config', None))
    config_manager.apply_environment(environ)

    config_overrides: Dict[str, Any] = {}
    for dest, key in flags.items():
        value = getattr(args, dest, None)
        if value is not None:
            config_overrides[key] = value
    if getattr(args, 'untied', False):
        config_overrides['model.tie_branches'] = False
    if getattr(args, 'no_checkpoints', False):
        config_overrides['output.save_checkpoints'] = False
    for name in ABLATIONS:
        if getattr(args, name, False):
            config_overrides[f'ablation.{name}'] = True
    config_manager.override_config(config_overrides)

    errors = config_manager.validation_errors()
    if errors:
        keys = [error.split(':', 1)[0] for error in errors]
        raise ConfigurationError(f"Invalid configuration: {'; '.join(errors)}", keys)
    return config_manager


def configure_logging(config_manager: ConfigurationManager) -> None:
    setup_logging(
        level=config_manager.get('logging.level', 'INFO'),
        log_format=config_manager.get('logging.format'),
        log_file=config_manager.get('logging.file')
    )


def resolve_dataset(config_manager: ConfigurationManager) -> Dataset:
    """Load ``data.path`` or synthesize from the synth section."""
    path = config_manager.get('data.path')
    if path:
        return load_dataset(path)
    return synthesize(config_manager.synth_spec())


def _dtype(config_manager: ConfigurationManager):
    return np.float64 if config_manager.get('model.precision') == 64 else np.float32


def cmd_synth(args: argparse.Namespace) -> int:
    config_manager = build_config_manager(args, SYNTH_FLAGS)
    configure_logging(config_manager)
    dataset = synthesize(config_manager.synth_spec())
    path = save_dataset(dataset, args.output)
    batch, window, features = dataset.samples.shape
    print(f"B={batch} T={window} F={features} C={dataset.classes} S={len(dataset.subject_ids)} -> {path}")
    return 0


def cmd_loso(args: argparse.Namespace) -> int:
    from .loso_orchestrator import LosoOrchestrator

    config_manager = build_config_manager(args, TRAINING_FLAGS)
    configure_logging(config_manager)
    dataset = resolve_dataset(config_manager)
    orchestrator = LosoOrchestrator(config_manager)
    result = orchestrator.run(dataset)
    accuracy = result.aggregate['accuracy']
    print(f"LOSO accuracy {accuracy['mean']:.2f} +/- {accuracy['std']:.2f}% over {len(result.reports)} folds "
          f"-> {orchestrator.storage.output_directory}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .loso_orchestrator import LosoOrchestrator

    config_manager = build_config_manager(args, TRAINING_FLAGS)
    configure_logging(config_manager)
    dataset = resolve_dataset(config_manager)
    if args.test_subject not in dataset.subject_ids:
        raise ConfigurationError(f"Test subject {args.test_subject} not in dataset subjects {dataset.subject_ids}",
                                 ['test_subject'])
    report = LosoOrchestrator(config_manager).run_single(dataset, args.test_subject)
    print(f"Subject {report.held_out_subject}: accuracy {report.accuracy:.2f}%, macro-F1 {report.macro_f1:.2f}%")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .network import check_gradients

    setup_logging(level=args.log_level or 'WARNING', log_file=args.log_file)
    if args.dropout > 0:
        print("Error: Gradient check requires dropout to be disabled", file=sys.stderr)
        return 2
    result = check_gradients(n_coords=args.samples, seed=args.seed, window=args.window,
                             tolerance=args.tolerance)
    passed = result.passed(args.tolerance)
    print(json.dumps({
        "checked": result.checked,
        "skipped": result.skipped,
        "max_rel_error": result.max_rel_error,
        "worst_coordinate": list(result.worst_coordinate) if result.worst_coordinate else None,
        "tolerance": args.tolerance,
        "passed": passed,
    }, indent=2))
    return 0 if passed else 3


def cmd_export(args: argparse.Namespace) -> int:
    setup_logging(level=args.log_level or 'INFO', log_file=args.log_file)
    run_directory = Path(args.run)
    if not run_directory.is_dir():
        raise FileNotFoundError(f"Run directory {run_directory} not found")
    echo = load_config_echo(run_directory)
    export_directory = run_directory / EXPORT_DIR
    export_directory.mkdir(parents=True, exist_ok=True)
    if args.kind == 'masks':
        written = export_masks(echo, export_directory)
    elif args.kind == 'confusion':
        written = export_confusion(run_directory, echo, export_directory)
    else:
        written = export_spatial_attention(run_directory, echo, export_directory, args.data)
    for path in written:
        print(path)
    return 0


def export_masks(echo: Dict[str, Any], export_directory: Path) -> List[Path]:
    derived = echo.get('derived', {})
    window = int(derived['dataset_shape'][1])
    radius = int(echo['config']['model']['local_window'])
    period = int(derived['sparse_period'])
    return [write_mask_csv(export_directory / 'local_mask.csv', build_local_mask(window, radius).as_binary()),
            write_mask_csv(export_directory / 'sparse_mask.csv', build_sparse_mask(window, period).as_binary())]


def export_confusion(run_directory: Path, echo: Dict[str, Any], export_directory: Path) -> List[Path]:
    """Row-normalised confusion per fold plus the pooled matrix over all folds."""
    reports = load_fold_reports(run_directory)
    if not reports:
        raise FileNotFoundError(f"No fold reports in {run_directory}")
    classes = len(reports[0].confusion)
    class_names = echo.get('derived', {}).get('class_names') or [f"class_{c}" for c in range(classes)]
    written = []
    pooled = np.zeros((classes, classes), dtype=np.int64)
    for report in reports:
        confusion = np.asarray(report.confusion, dtype=np.int64)
        pooled += confusion
        written.append(write_confusion_csv(export_directory / f"fold_{report.held_out_subject}_{CONFUSION}",
                                           confusion, class_names, normalized=True))
    written.append(write_confusion_csv(export_directory / CONFUSION, pooled, class_names, normalized=True))
    return written


def export_spatial_attention(run_directory: Path, echo: Dict[str, Any], export_directory: Path,
                             data_path: Optional[str]) -> List[Path]:
    """Spatial attention of every held-out window, restored from the fold checkpoints."""
    from .loso_orchestrator import load_fold_network

    config_manager = ConfigurationManager.from_dict(echo['config'])
    if data_path:
        config_manager.set('data.path', data_path)
    dataset = resolve_dataset(config_manager)
    config = config_manager.train_config()
    reports = load_fold_reports(run_directory)
    if not reports:
        raise FileNotFoundError(f"No fold reports in {run_directory}")
    written = []
    for report in reports:
        subject = report.held_out_subject
        network, fold = load_fold_network(run_directory / f"fold_{subject}" / "checkpoint", dataset, subject,
                                          config, _dtype(config_manager))
        weights = network.spatial_attention(fold.test.samples)
        written.append(write_spatial_attention_csv(export_directory / f"spatial_attention_fold_{subject}.csv",
                                                   weights, fold.test.subjects, fold.test.labels))
    return written


def cmd_dump_masks(args: argparse.Namespace) -> int:
    local = build_local_mask(args.window, args.radius).as_binary()
    sparse = build_sparse_mask(args.window, args.period).as_binary()
    if args.output_dir:
        directory = Path(args.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        print(write_mask_csv(directory / 'local_mask.csv', local))
        print(write_mask_csv(directory / 'sparse_mask.csv', sparse))
        return 0
    for title, mask in ((f"# local T={args.window} w={args.radius}", local),
                        (f"# sparse T={args.window} p={args.period}", sparse)):
        print(title)
        for row in mask:
            print(",".join(str(int(v)) for v in row))
    return 0


def cmd_topology(args: argparse.Namespace) -> int:
    from .topology import dump_partition

    if args.output:
        with open(args.output, 'w', encoding='utf-8', newline='') as f:
            dump_partition(f)
    else:
        dump_partition(sys.stdout)
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    from .oracle import calibrate_shift, oracle_loso

    config_manager = build_config_manager(args, TRAINING_FLAGS)
    configure_logging(config_manager)
    if args.calibrate:
        shift, result = calibrate_shift(config_manager.synth_spec())
        print(json.dumps({"shift": shift, **result.to_dict()}, indent=2, sort_keys=True))
        return 0
    result = oracle_loso(resolve_dataset(config_manager))
    print(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_timing(args: argparse.Namespace) -> int:
    from .loso_orchestrator import prepare_fold
    from .trainer import train_fold

    config_manager = build_config_manager(args, TRAINING_FLAGS)
    configure_logging(config_manager)
    dataset = resolve_dataset(config_manager)
    config = config_manager.train_config()
    held_out = args.test_subject if args.test_subject is not None else dataset.subject_ids[0]
    if held_out not in dataset.subject_ids:
        raise ConfigurationError(f"Test subject {held_out} not in dataset subjects {dataset.subject_ids}",
                                 ['test_subject'])
    fold = prepare_fold(dataset, held_out, config)
    result = train_fold(fold.train, fold.val, config, fold=held_out, held_out=held_out,
                        dtype=_dtype(config_manager))
    started = time.perf_counter()
    result.network.predict(fold.test.samples)
    latency = (time.perf_counter() - started) / max(1, len(fold.test))
    print(json.dumps({
        "heads": config.heads,
        "d_k": config.head_dim,
        "epochs_run": result.epochs_run,
        "mean_epoch_seconds": result.mean_epoch_seconds,
        "inference_ms_per_sample": 1000.0 * latency,
        "parameters": result.network.store.count(),
    }, indent=2))
    return 0


COMMANDS = {
    'synth': cmd_synth,
    'loso': cmd_loso,
    'train': cmd_train,
    'gradcheck': cmd_gradcheck,
    'export': cmd_export,
    'dump-masks': cmd_dump_masks,
    'topology': cmd_topology,
    'oracle': cmd_oracle,
    'timing': cmd_timing,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for the application."""
    parser = create_argument_parser()

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse calls sys.exit() on error, catch it to return proper exit code
        return e.code if e.code is not None else 1

    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user.", file=sys.stderr)
        return 130
    except ConfigurationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 2
    except DatasetFormatError as e:
        print(f"Error: Malformed dataset at byte {e.offset}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"Error: File not found: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"Error: Numerical failure: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        logger.exception("Unhandled error")
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
