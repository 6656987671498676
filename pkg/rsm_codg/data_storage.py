"""
Run artifact storage.

This module writes everything a run leaves on disk: the effective config
echo, per-fold reports, JSON-lines training logs, raw and row-normalised
confusion matrices, aggregate results and the CSV exports.
"""

import csv
import json
import logging
import subprocess
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .metrics import row_normalize
from .models import FoldReport
from .topology import feature_labels

logger = logging.getLogger(__name__)

CONFIG_ECHO = "config_echo.json"
AGGREGATE = "aggregate.json"
REPORT = "report.json"
TRAIN_LOG = "train_log.jsonl"
FOLD_LOG = "fold.log"
CONFUSION = "confusion.csv"
CHECKPOINT_DIR = "checkpoint"


PACKAGE_DIR = Path(__file__).resolve().parent


def git_describe() -> Optional[str]:
    """``git describe --always --dirty`` of the checkout holding this package, or None outside one."""
    try:
        completed = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                                   text=True, timeout=5, check=False, cwd=PACKAGE_DIR)
    except (OSError, subprocess.SubprocessError):
        return None
    if completed.returncode != 0:
        return None
    return completed.stdout.strip() or None


class TrainingLog:
    """Append-only JSON-lines log of per-iteration and per-epoch records."""

    def __init__(self, path: Path, fold: int):
        self.path = Path(path)
        self.fold = fold
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8")

    def write(self, record: Dict[str, Any]) -> None:
        entry = {"fold": self.fold}
        entry.update(record)
        self._handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()

    def __enter__(self) -> "TrainingLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_training_log(path: Path) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


class RunStorage:
    """Lays out and writes one run directory."""

    def __init__(self, config: Dict[str, Any]):
        """Initialize RunStorage with configuration settings."""
        self.config = config
        self.output_directory = Path(config.get("output", {}).get("directory", "./runs"))
        self.save_checkpoints = bool(config.get("output", {}).get("save_checkpoints", True))
        self.log_level = str(config.get("logging", {}).get("level", "INFO"))
        self.output_directory.mkdir(parents=True, exist_ok=True)

    def fold_directory(self, subject: int) -> Path:
        path = self.output_directory / f"fold_{subject}"
        path.mkdir(parents=True, exist_ok=True)
        return path

    def checkpoint_directory(self, subject: int) -> Path:
        return self.fold_directory(subject) / CHECKPOINT_DIR

    def training_log(self, subject: int) -> TrainingLog:
        return TrainingLog(self.fold_directory(subject) / TRAIN_LOG, subject)

    def fold_log_path(self, subject: int) -> Path:
        return self.fold_directory(subject) / FOLD_LOG

    def store_config_echo(self, effective: Dict[str, Any], config_hash: str, version: str,
                          extra: Optional[Dict[str, Any]] = None) -> Path:
        """Write the effective configuration with provenance before training starts."""
        echo = {
            "config": effective,
            "config_hash": config_hash,
            "version": version,
            "git_describe": git_describe(),
            "timestamp": datetime.now().isoformat(),
        }
        if extra:
            echo.update(extra)
        return self._store_json(echo, self.output_directory / CONFIG_ECHO)

    def store_fold_report(self, report: FoldReport, class_names: Sequence[str]) -> Path:
        directory = self.fold_directory(report.held_out_subject)
        write_confusion_csv(directory / CONFUSION, np.asarray(report.confusion), class_names)
        path = self._store_json(report.to_dict(), directory / REPORT)
        logger.info(f"Fold {report.held_out_subject} report stored to {path}")
        return path

    def store_aggregate(self, aggregate: Dict[str, Any]) -> Path:
        """Aggregate JSON carries no timestamps so equal runs give equal bytes."""
        path = self._store_json(aggregate, self.output_directory / AGGREGATE)
        logger.info(f"Aggregate results stored to {path}")
        return path

    def _store_json(self, data: Dict[str, Any], path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write("\n")
        return path


def load_fold_reports(run_directory: Path) -> List[FoldReport]:
    """Read every ``fold_<s>/report.json`` under a run directory, ordered by subject."""
    reports = []
    for path in sorted(Path(run_directory).glob(f"fold_*/{REPORT}")):
        with open(path, "r", encoding="utf-8") as f:
            reports.append(FoldReport.from_dict(json.load(f)))
    return sorted(reports, key=lambda r: r.held_out_subject)


def load_config_echo(run_directory: Path) -> Dict[str, Any]:
    path = Path(run_directory) / CONFIG_ECHO
    if not path.exists():
        raise FileNotFoundError(f"No {CONFIG_ECHO} in {run_directory}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_confusion_csv(path: Path, confusion: np.ndarray, class_names: Sequence[str],
                        normalized: bool = False) -> Path:
    """Confusion matrix with a header row of predicted classes and one row per true class."""
    values = row_normalize(confusion) if normalized else np.asarray(confusion)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred"] + list(class_names))
        for name, row in zip(class_names, values):
            writer.writerow([name] + [_format(v) for v in row])
    return path


def write_mask_csv(path: Path, binary: np.ndarray) -> Path:
    """0/1 mask, one row per query step, no header."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerows(np.asarray(binary, dtype=np.int64).tolist())
    return path


def write_spatial_attention_csv(path: Path, weights: np.ndarray, subjects: Iterable[int],
                                labels: Iterable[int]) -> Path:
    """One row per sample: sample index, subject, label, then one column per (electrode, band)."""
    columns = feature_labels()
    if weights.shape[1] != len(columns):
        raise ValueError(f"Expected {len(columns)} attention columns, got {weights.shape[1]}")
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample", "subject", "label"] + columns)
        for index, (row, subject, label) in enumerate(zip(weights, subjects, labels)):
            writer.writerow([index, int(subject), int(label)] + [_format(v) for v in row])
    logger.info(f"Spatial attention for {len(weights)} samples written to {path}")
    return path


def _format(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))
