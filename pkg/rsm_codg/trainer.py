"""
Training of one fold.

Each epoch runs a fixed number of inner iterations; every iteration draws
one minibatch from each source subject, so the pairwise subject losses
always see several domains. Validation loss drives early stopping and the
best parameters are restored at the end.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from .align import PREFIX as ALIGN_PREFIX
from .data_storage import TrainingLog
from .models import Dataset, TrainConfig
from .network import RsmCodgNetwork
from .optim import AdamState, NumericalError, adam_step, schedule_lr
from .param_store import make_rng

logger = logging.getLogger(__name__)


class AuditError(RuntimeError):
    """Raised when held-out subject data reaches a training or validation batch."""


def inject_noise(samples: np.ndarray, sigma: float, rng: np.random.Generator, train: bool = True) -> np.ndarray:
    """Additive N(0, sigma^2) noise in train mode; identity in eval mode or for sigma = 0."""
    if not train or sigma == 0:
        return samples
    return (samples + sigma * rng.standard_normal(samples.shape)).astype(samples.dtype)


def validation_split(dataset: Dataset, fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stratified split by (subject, class) cell.

    Each cell with at least two windows gives round(fraction * n) of them
    (at least one, never all) to validation.

    Returns:
        Tuple of sorted (train positions, validation positions)
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"Validation fraction must lie in [0, 1), got {fraction}")
    validation: List[np.ndarray] = []
    if fraction > 0:
        for subject in dataset.subject_ids:
            for label in range(dataset.classes):
                cell = np.nonzero((dataset.subjects == subject) & (dataset.labels == label))[0]
                if len(cell) < 2:
                    continue
                count = min(max(1, int(round(fraction * len(cell)))), len(cell) - 1)
                validation.append(rng.permutation(cell)[:count])
    val_index = np.sort(np.concatenate(validation)) if validation else np.zeros(0, dtype=np.int64)
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[val_index] = False
    return np.nonzero(train_mask)[0], val_index


class SubjectBatcher:
    """Per-subject shuffled minibatches, one from every subject per iteration."""

    def __init__(self, subjects: np.ndarray, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise ValueError(f"Batch size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.rng = rng
        self.groups = {int(s): np.nonzero(subjects == s)[0] for s in np.unique(subjects)}

    @property
    def iterations_per_epoch(self) -> int:
        largest = max(len(group) for group in self.groups.values())
        return math.ceil(largest / self.batch_size)

    def epoch(self) -> Iterator[np.ndarray]:
        """Yield the positions of each iteration; smaller subjects reshuffle when exhausted."""
        orders = {s: self.rng.permutation(group) for s, group in self.groups.items()}
        cursors = {s: 0 for s in self.groups}
        for _ in range(self.iterations_per_epoch):
            batch = []
            for subject in sorted(self.groups):
                take = min(self.batch_size, len(self.groups[subject]))
                if cursors[subject] + take > len(orders[subject]):
                    orders[subject] = self.rng.permutation(self.groups[subject])
                    cursors[subject] = 0
                batch.append(orders[subject][cursors[subject]:cursors[subject] + take])
                cursors[subject] += take
            yield np.concatenate(batch)


@dataclass
class FoldResult:
    network: RsmCodgNetwork
    history: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    epochs_run: int = 0
    audit_passed: bool = True

    @property
    def mean_epoch_seconds(self) -> float:
        seconds = [entry["seconds"] for entry in self.history]
        return float(np.mean(seconds)) if seconds else 0.0


def train_fold(train: Dataset, val: Dataset, config: TrainConfig, fold: int = -1,
               held_out: Optional[int] = None, log: Optional[TrainingLog] = None,
               dtype=np.float32) -> FoldResult:
    """
    Train a fresh network on the source subjects of one fold.

    Args:
        train: Normalised source training windows
        val: Normalised source validation windows (may be empty)
        config: Effective hyperparameters
        fold: Fold id used in logs and RNG stream names
        held_out: Subject that must never appear in a batch
        log: Training log receiving iteration and epoch records
        dtype: Parameter precision

    Returns:
        FoldResult holding the network restored to its best epoch

    Raises:
        ValueError: With fewer than two training subjects
        NumericalError: On a non-finite loss or gradient
        AuditError: If the held-out subject leaks into training or validation
    """
    subjects = train.subject_ids
    if len(subjects) < 2:
        raise ValueError(f"Training needs at least 2 source subjects, got {len(subjects)}")
    if held_out is not None and (held_out in subjects or np.any(val.subjects == held_out)):
        raise AuditError(f"Fold {fold}: held-out subject {held_out} present in source data")

    network = RsmCodgNetwork(config, subjects, train.classes, train.window, dtype=dtype)
    # alignment matrices: scaled steps and no decay toward zero
    state = AdamState(weight_decay=config.weight_decay, lr_scale={ALIGN_PREFIX: config.align_lr_scale},
                      decay_exclude=(ALIGN_PREFIX,))
    batcher = SubjectBatcher(train.subjects, config.batch_size, make_rng(config.seed, f"fold/{fold}/batches"))
    noise_rng = make_rng(config.seed, f"fold/{fold}/noise")
    dropout_rng = make_rng(config.seed, f"fold/{fold}/dropout")
    result = FoldResult(network=network)
    best_state = network.store.snapshot()
    bad_epochs = 0

    logger.info(f"Fold {fold}: training on subjects {subjects} ({len(train)} windows, {len(val)} validation), "
                f"{batcher.iterations_per_epoch} iterations/epoch")

    for epoch in range(config.epochs):
        started = time.perf_counter()
        lr = schedule_lr(epoch, config.lr, config.step_size, config.gamma)
        epoch_losses = []
        for iteration, index in enumerate(batcher.epoch()):
            batch_subjects = train.subjects[index]
            if held_out is not None and np.any(batch_subjects == held_out):
                result.audit_passed = False
                raise AuditError(f"Fold {fold}: held-out subject {held_out} in training batch")
            samples = inject_noise(train.samples[index], config.noise_std, noise_rng, train=True)

            network.store.zero_grad()
            output = network.forward(samples, batch_subjects, train=True, rng=dropout_rng)
            bundle = network.losses(output, train.labels[index], batch_subjects)
            values = bundle.as_floats()
            if not math.isfinite(values["loss_total"]):
                logger.error(f"Fold {fold}: non-finite loss at epoch {epoch}, iteration {iteration}: {values}")
                raise NumericalError(f"Fold {fold}: non-finite loss at epoch {epoch}, iteration {iteration}",
                                     "loss_total")
            bundle.total.backward()
            try:
                adam_step(network.store, state, lr)
            except NumericalError as e:
                raise NumericalError(f"Fold {fold}: {e}", e.path) from e

            epoch_losses.append(values["loss_total"])
            if log is not None:
                record = {"epoch": epoch, "iter": iteration, "lr": lr,
                          "n_subjects": int(len(np.unique(batch_subjects)))}
                record.update(values)
                log.write(record)
            logger.debug(f"Fold {fold} epoch {epoch} iter {iteration}: {values}")

        train_loss = float(np.mean(epoch_losses))
        # without a validation split the training loss drives early stopping
        val_loss = network.validation_loss(val.samples, val.labels) if len(val) else train_loss
        if not math.isfinite(val_loss):
            raise NumericalError(f"Fold {fold}: non-finite validation loss at epoch {epoch}", "val_loss")
        improved = val_loss < result.best_val_loss
        if improved:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = network.store.snapshot()
            bad_epochs = 0
        else:
            bad_epochs += 1

        entry = {"epoch": epoch, "kind": "epoch", "train_loss": train_loss, "val_loss": val_loss,
                 "best_val_loss": result.best_val_loss, "improved": improved, "lr": lr}
        if log is not None:
            log.write(entry)
        entry["seconds"] = time.perf_counter() - started
        result.history.append(entry)
        result.epochs_run = epoch + 1
        logger.info(f"Fold {fold} epoch {epoch}: train {train_loss:.4f}, val {val_loss:.4f}"
                    f"{' (best)' if improved else ''}, lr {lr:.2e}")

        if bad_epochs > config.patience:
            logger.info(f"Fold {fold}: early stop after epoch {epoch} "
                        f"(best epoch {result.best_epoch}, val {result.best_val_loss:.4f})")
            break

    network.store.restore(best_state)
    return result
