"""
Leave-one-subject-out orchestrator.

This module provides the LosoOrchestrator class that coordinates data
preparation, per-fold training and evaluation, artifact storage and the
aggregate summary of a full LOSO run.
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .config_manager import ConfigurationManager
from .data_storage import RunStorage
from .dataio import minmax_normalize
from .logging_config import fold_logging
from .metrics import compute_metrics, mean_and_std
from .models import Dataset, FoldReport, TrainConfig
from .network import RsmCodgNetwork
from .param_store import make_rng
from .trainer import FoldResult, train_fold, validation_split

logger = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "macro_f1", "sensitivity", "specificity")


@dataclass
class LosoResult:
    reports: List[FoldReport] = field(default_factory=list)
    aggregate: Dict[str, Any] = field(default_factory=dict)


@dataclass
class PreparedFold:
    """Normalised train/validation/test windows for one held-out subject."""
    held_out: int
    train: Dataset
    val: Dataset
    test: Dataset


def prepare_fold(dataset: Dataset, held_out: int, config: TrainConfig) -> PreparedFold:
    """Split off the held-out subject and normalise with source training statistics only."""
    source = dataset.select(dataset.subjects != held_out)
    target = dataset.select(dataset.subjects == held_out)
    if len(target) == 0:
        raise ValueError(f"Subject {held_out} has no windows")
    train_index, val_index = validation_split(source, config.val_fraction,
                                              make_rng(config.seed, f"fold/{held_out}/split"))
    train, (val, test), _ = minmax_normalize(source.select(train_index), [source.select(val_index), target])
    return PreparedFold(held_out, train, val, test)


def evaluate_fold(result: FoldResult, fold: PreparedFold, config_hash: str) -> FoldReport:
    predictions = result.network.predict(fold.test.samples)
    metrics = compute_metrics(predictions, fold.test.labels, fold.test.classes)
    return FoldReport(
        held_out_subject=int(fold.held_out),
        accuracy=metrics["accuracy"],
        macro_f1=metrics["macro_f1"],
        sensitivity=metrics["sensitivity"],
        specificity=metrics["specificity"],
        confusion=metrics["confusion"].tolist(),
        config_hash=config_hash,
        epochs_run=result.epochs_run,
        best_epoch=result.best_epoch,
        best_val_loss=float(result.best_val_loss),
        n_test=len(fold.test),
        per_class=metrics["per_class"],
        diagnostics=result.network.diagnostics.to_dict(),
        audit_passed=result.audit_passed,
    )


def run_fold(dataset: Dataset, held_out: int, config: TrainConfig, config_hash: str,
             storage_config: Optional[Dict[str, Any]] = None, dtype=np.float32) -> FoldReport:
    """
    Train and evaluate one fold; importable at module level for worker processes.

    Args:
        dataset: Full (unnormalised) dataset
        held_out: Subject used as the unseen target
        config: Effective hyperparameters
        config_hash: Hash recorded in the report
        storage_config: Configuration dictionary for RunStorage, None to skip writing
        dtype: Parameter precision

    Returns:
        FoldReport of the held-out subject
    """
    storage = RunStorage(storage_config) if storage_config is not None else None
    if storage is None:
        return _train_and_evaluate(dataset, held_out, config, config_hash, None, dtype)
    with fold_logging(storage.fold_log_path(held_out), held_out, storage.log_level):
        return _train_and_evaluate(dataset, held_out, config, config_hash, storage, dtype)


def _train_and_evaluate(dataset: Dataset, held_out: int, config: TrainConfig, config_hash: str,
                        storage: Optional[RunStorage], dtype) -> FoldReport:
    fold = prepare_fold(dataset, held_out, config)
    log = storage.training_log(held_out) if storage is not None else None
    try:
        result = train_fold(fold.train, fold.val, config, fold=held_out, held_out=held_out, log=log, dtype=dtype)
    finally:
        if log is not None:
            log.close()
    report = evaluate_fold(result, fold, config_hash)
    if storage is not None:
        storage.store_fold_report(report, dataset.class_names)
        if storage.save_checkpoints:
            result.network.store.save(str(storage.checkpoint_directory(held_out)))
    logger.info(f"Fold {held_out}: accuracy {report.accuracy:.2f}%, macro-F1 {report.macro_f1:.2f}% "
                f"after {report.epochs_run} epochs")
    return report


def load_fold_network(checkpoint_directory: Path, dataset: Dataset, held_out: int, config: TrainConfig,
                      dtype=np.float32) -> Tuple[RsmCodgNetwork, PreparedFold]:
    """
    Rebuild a fold's network from its checkpoint together with the fold's normalised data.

    Raises:
        FileNotFoundError: If the checkpoint is missing
    """
    if not (Path(checkpoint_directory) / "manifest.json").exists():
        raise FileNotFoundError(f"No checkpoint in {checkpoint_directory}")
    fold = prepare_fold(dataset, held_out, config)
    network = RsmCodgNetwork(config, fold.train.subject_ids, dataset.classes, dataset.window, dtype=dtype)
    network.store.load(str(checkpoint_directory))
    return network, fold


def aggregate_reports(reports: Sequence[FoldReport], config: TrainConfig, config_hash: str,
                      window: int) -> Dict[str, Any]:
    """Mean and population std of every metric plus the settings every report must record."""
    ordered = sorted(reports, key=lambda r: r.held_out_subject)
    aggregate: Dict[str, Any] = {
        name: mean_and_std([getattr(r, name) for r in ordered]) for name in METRIC_NAMES
    }
    aggregate.update({
        "config_hash": config_hash,
        "n_folds": len(ordered),
        "std_kind": "population",
        "ablations": config.ablations(),
        "hyperparameters": asdict(config),
        "d_k": config.head_dim,
        "sparse_period": config.period_for(window),
        "folds": [
            {"held_out_subject": r.held_out_subject, "epochs_run": r.epochs_run, "best_epoch": r.best_epoch,
             **{name: getattr(r, name) for name in METRIC_NAMES}}
            for r in ordered
        ],
    })
    return aggregate


def loso_run(dataset: Dataset, config: TrainConfig, config_hash: str = "",
             storage_config: Optional[Dict[str, Any]] = None, fold_workers: int = 1,
             dtype=np.float32, subjects: Optional[Sequence[int]] = None) -> LosoResult:
    """
    Hold out each subject exactly once and aggregate the fold reports.

    Raises:
        ValueError: With fewer than three subjects
    """
    subject_ids = list(subjects) if subjects is not None else dataset.subject_ids
    if len(dataset.subject_ids) < 3:
        raise ValueError(f"LOSO needs at least 3 subjects, got {len(dataset.subject_ids)}")

    reports: List[FoldReport] = []
    if fold_workers > 1 and len(subject_ids) > 1:
        with ProcessPoolExecutor(max_workers=fold_workers) as executor:
            future_to_subject = {
                executor.submit(run_fold, dataset, s, config, config_hash, storage_config, dtype): s
                for s in subject_ids
            }
            for future in as_completed(future_to_subject):
                reports.append(future.result())
    else:
        for subject in subject_ids:
            reports.append(run_fold(dataset, subject, config, config_hash, storage_config, dtype))

    reports.sort(key=lambda r: r.held_out_subject)
    return LosoResult(reports, aggregate_reports(reports, config, config_hash, dataset.window))


class LosoOrchestrator:
    """Coordinates a complete LOSO run from configuration to stored aggregate."""

    def __init__(self, config_manager: Optional[ConfigurationManager] = None):
        """
        Initialize the orchestrator with configuration.

        Args:
            config_manager: Configuration manager instance, creates default if None
        """
        self.config_manager = config_manager or ConfigurationManager()
        self.config = self.config_manager.train_config()
        self.config_hash = self.config_manager.config_hash()
        self.storage = RunStorage(self.config_manager.get_all())
        self.dtype = np.float64 if self.config_manager.get("model.precision") == 64 else np.float32
        self.fold_workers = int(self.config_manager.get("training.fold_workers", 1))
        logger.info(f"LosoOrchestrator initialized (config hash {self.config_hash[:12]})")

    def echo_config(self, dataset: Dataset) -> None:
        """Write the effective configuration before any training starts."""
        self.storage.store_config_echo(
            self.config_manager.get_all(), self.config_hash, __version__,
            extra={"derived": {"d_k": self.config.head_dim,
                               "sparse_period": self.config.period_for(dataset.window),
                               "dataset_shape": list(dataset.samples.shape),
                               "class_names": list(dataset.class_names),
                               "subjects": dataset.subject_ids}})

    def run(self, dataset: Dataset, subjects: Optional[Sequence[int]] = None) -> LosoResult:
        """
        Run LOSO over ``subjects`` (default: every subject) and store all artifacts.

        Returns:
            LosoResult with fold reports and the aggregate summary
        """
        start_time = time.time()
        logger.info(f"Starting LOSO run: {len(dataset)} windows, subjects {dataset.subject_ids}")
        self.echo_config(dataset)
        result = loso_run(dataset, self.config, self.config_hash, self.config_manager.get_all(),
                          self.fold_workers, self.dtype, subjects)
        self.storage.store_aggregate(result.aggregate)
        self._log_final_summary(result, time.time() - start_time)
        return result

    def run_single(self, dataset: Dataset, test_subject: int) -> FoldReport:
        """Train on every other subject and evaluate ``test_subject``."""
        if test_subject not in dataset.subject_ids:
            raise ValueError(f"Test subject {test_subject} not in dataset subjects {dataset.subject_ids}")
        self.echo_config(dataset)
        return run_fold(dataset, test_subject, self.config, self.config_hash, self.config_manager.get_all(),
                        self.dtype)

    def _log_final_summary(self, result: LosoResult, execution_time: float) -> None:
        accuracy = result.aggregate["accuracy"]
        logger.info("=" * 50)
        logger.info("LOSO RUN SUMMARY")
        logger.info("=" * 50)
        logger.info(f"Folds: {result.aggregate['n_folds']}")
        for report in result.reports:
            logger.info(f"  subject {report.held_out_subject}: {report.accuracy:.2f}%")
        logger.info(f"Accuracy: {accuracy['mean']:.2f} +/- {accuracy['std']:.2f}%")
        logger.info(f"Execution time: {execution_time:.2f} seconds")
        logger.info("=" * 50)
