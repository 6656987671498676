"""
Dataset input/output, preprocessing and synthesis.

This module segments per-trial feature sequences into fixed windows, applies
train-only min-max normalisation, generates multi-subject synthetic datasets
with controllable inter-subject shift, and reads/writes the binary dataset
container with its JSON sidecar.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import Dataset, SynthSpec, Trial
from .param_store import make_rng
from .topology import BAND_NAMES, DEFAULT_PARTITION, FEATURE_DIM, N_BANDS

logger = logging.getLogger(__name__)

MAGIC = b"RSMC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<5I")
HEADER_SIZE = len(MAGIC) + 1 + _HEADER.size
SIDECAR_SUFFIX = ".json"

# Mixing matrices above this condition number are redrawn.
MAX_MIXING_CONDITION = 1e4


class DatasetFormatError(ValueError):
    """Raised when a dataset container cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SegmentationError(ValueError):
    """Raised when a trial is shorter than the window."""


def segment_windows(trials: Sequence[Trial], window: int, classes: Optional[int] = None) -> Dataset:
    """
    Cut every trial into consecutive non-overlapping windows of ``window`` steps.

    The trial label and subject are copied to each window; a trailing
    remainder shorter than the window is dropped.

    Raises:
        SegmentationError: If a trial is shorter than the window
    """
    if window < 1:
        raise ValueError(f"Window must be >= 1, got {window}")
    samples, labels, subjects = [], [], []
    for position, trial in enumerate(trials):
        values = np.asarray(trial.values)
        name = trial.name or f"trial {position}"
        if values.ndim != 2:
            raise SegmentationError(f"{name}: expected (time, feature) array, got shape {values.shape}")
        if values.shape[0] < window:
            raise SegmentationError(f"{name}: length {values.shape[0]} is shorter than window {window}")
        count = values.shape[0] // window
        samples.append(values[:count * window].reshape(count, window, values.shape[1]))
        labels.extend([trial.label] * count)
        subjects.extend([trial.subject] * count)
    if not samples:
        raise SegmentationError("no trials to segment")
    if classes is None:
        classes = max(labels) + 1
    dataset = Dataset(np.concatenate(samples, axis=0), np.array(labels), np.array(subjects), classes)
    logger.debug(f"Segmented {len(trials)} trials into {len(dataset)} windows of {window} steps")
    return dataset


def minmax_normalize(train: Dataset, others: Sequence[Dataset] = ()
                     ) -> Tuple[Dataset, List[Dataset], Tuple[np.ndarray, np.ndarray]]:
    """
    Scale each feature column to [0, 1] using training statistics only.

    Statistics are taken over all windows and time steps of ``train`` and
    applied unchanged (no clipping) to ``others``; constant columns map to 0.

    Returns:
        Tuple of (normalised train, normalised others, (column min, column max))
    """
    if len(train) == 0:
        raise ValueError("Cannot normalise with an empty training set")
    flat = train.samples.reshape(-1, train.feature_dim).astype(np.float64)
    low = flat.min(axis=0)
    high = flat.max(axis=0)
    span = high - low
    constant = span == 0
    scale = np.where(constant, 0.0, 1.0 / np.where(constant, 1.0, span))

    def apply(dataset: Dataset) -> Dataset:
        values = (dataset.samples.astype(np.float64) - low) * scale
        return dataset.with_samples(values.astype(dataset.samples.dtype))

    return apply(train), [apply(d) for d in others], (low, high)


def class_pattern(label: int, partition=DEFAULT_PARTITION) -> np.ndarray:
    """Unit pattern raising the (region, band) block assigned to a class."""
    region_name, members = partition.regions[label % len(partition.regions)]
    band = (2 * label + 1) % N_BANDS
    pattern = np.zeros(FEATURE_DIM)
    pattern[[electrode * N_BANDS + band for electrode in members]] = 1.0
    return pattern


def _mixing_matrix(rng: np.random.Generator, shift: float, size: int) -> np.ndarray:
    identity = np.eye(size)
    if shift == 0:
        return identity
    for _ in range(16):
        mixing = identity + shift * rng.standard_normal((size, size)) / np.sqrt(size)
        if np.linalg.cond(mixing) < MAX_MIXING_CONDITION:
            return mixing
    raise ValueError(f"Could not draw a well-conditioned mixing matrix for shift {shift}")


def synthesize(spec: SynthSpec) -> Dataset:
    """
    Draw a multi-subject dataset with class-specific regional band patterns.

    Each class raises the mean of its own (region, band) block with a
    per-window sinusoidal envelope; every subject applies its own invertible
    linear mixing (identity at zero shift) and white noise of standard
    deviation 1/SNR is added. The output depends only on ``spec``.
    """
    base_rng = make_rng(spec.seed, "synth/base")
    base = 1.0 + 0.25 * base_rng.standard_normal(FEATURE_DIM)
    patterns = np.stack([class_pattern(c) for c in range(spec.classes)])
    sigma = 0.0 if np.isinf(spec.snr) else 1.0 / spec.snr
    steps = np.arange(spec.window)

    samples, labels, subjects = [], [], []
    for subject in range(spec.subjects):
        rng = make_rng(spec.seed, f"synth/subject/{subject}")
        mixing = _mixing_matrix(rng, spec.shift, FEATURE_DIM)
        subject_labels = rng.permutation(np.arange(spec.per_subject) % spec.classes)
        phase = rng.uniform(0, 2 * np.pi, size=spec.per_subject)
        envelope = 1.0 + 0.5 * np.sin(2 * np.pi * steps[None, :] / spec.window + phase[:, None])
        clean = base[None, None, :] + envelope[:, :, None] * patterns[subject_labels][:, None, :]
        mixed = clean @ mixing
        if sigma > 0:
            mixed = mixed + sigma * rng.standard_normal(mixed.shape)
        samples.append(mixed)
        labels.append(subject_labels)
        subjects.append(np.full(spec.per_subject, subject))

    dataset = Dataset(
        samples=np.concatenate(samples).astype(np.float32),
        labels=np.concatenate(labels),
        subjects=np.concatenate(subjects),
        classes=spec.classes,
        class_names=[f"class_{c}" for c in range(spec.classes)],
        provenance={"generator": "synthesize", "spec": spec.to_dict()},
    )
    logger.info(f"Synthesized {len(dataset)} windows: {spec.subjects} subjects, "
                f"{spec.classes} classes, T={spec.window}, shift={spec.shift}, snr={spec.snr}")
    return dataset


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_dataset(dataset: Dataset, path: str) -> Path:
    """Write the binary container and its JSON sidecar."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    subject_ids = dataset.subject_ids
    if subject_ids and (subject_ids[0] < 0 or subject_ids[-1] > 255):
        raise ValueError("Subject ids must fit in one byte")
    if dataset.classes > 255:
        raise ValueError("Class count must fit in one byte")
    batch, window, features = dataset.samples.shape
    header = MAGIC + bytes([FORMAT_VERSION]) + _HEADER.pack(
        batch, window, features, dataset.classes, len(subject_ids))
    with open(target, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(dataset.samples, dtype="<f4").tobytes())
        f.write(dataset.labels.astype(np.uint8).tobytes())
        f.write(dataset.subjects.astype(np.uint8).tobytes())
    sidecar = {
        "class_names": list(dataset.class_names),
        "subjects": subject_ids,
        "bands": list(BAND_NAMES),
        "provenance": dataset.provenance,
    }
    with open(sidecar_path(target), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.info(f"Dataset ({batch}, {window}, {features}) written to {target}")
    return target


def load_dataset(path: str) -> Dataset:
    """
    Read a dataset container (and sidecar, when present).

    Raises:
        DatasetFormatError: On malformed header, dimension mismatch,
            truncation or non-finite values, with the byte offset
    """
    source = Path(path)
    raw = source.read_bytes()
    header = _parse_header(raw)
    batch, window, features, classes, subject_count = header

    row_bytes = window * features * 4
    float_end = HEADER_SIZE + batch * row_bytes
    expected = float_end + 2 * batch
    if len(raw) != expected:
        _raise_size_error(raw, header, expected)

    values = np.frombuffer(raw, dtype="<f4", count=batch * window * features, offset=HEADER_SIZE)
    finite = np.isfinite(values)
    if not finite.all():
        first = int(np.argmin(finite))
        raise DatasetFormatError(f"non-finite value at element {first}", HEADER_SIZE + 4 * first)
    labels = np.frombuffer(raw, dtype=np.uint8, count=batch, offset=float_end).astype(np.int64)
    subjects = np.frombuffer(raw, dtype=np.uint8, count=batch, offset=float_end + batch).astype(np.int64)
    bad_labels = np.nonzero(labels >= classes)[0]
    if len(bad_labels):
        raise DatasetFormatError(f"label {labels[bad_labels[0]]} >= C={classes}", float_end + int(bad_labels[0]))
    if len(np.unique(subjects)) != subject_count:
        raise DatasetFormatError(
            f"header declares S={subject_count} but {len(np.unique(subjects))} distinct subject ids found",
            float_end + batch)

    sidecar: Dict = {}
    if sidecar_path(source).exists():
        with open(sidecar_path(source), "r", encoding="utf-8") as f:
            sidecar = json.load(f)
    dataset = Dataset(
        samples=values.reshape(batch, window, features).copy(),
        labels=labels,
        subjects=subjects,
        classes=classes,
        class_names=sidecar.get("class_names", []),
        provenance=sidecar.get("provenance", {}),
    )
    logger.info(f"Loaded dataset ({batch}, {window}, {features}) from {source}")
    return dataset


def _parse_header(raw: bytes) -> Tuple[int, int, int, int, int]:
    if len(raw) < HEADER_SIZE:
        raise DatasetFormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes", len(raw))
    if raw[:4] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", 0)
    if raw[4] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {raw[4]}", 4)
    fields = _HEADER.unpack_from(raw, 5)
    for position, (name, value) in enumerate(zip("BTFCS", fields)):
        if value < 1:
            raise DatasetFormatError(f"malformed header: {name}={value}", 5 + 4 * position)
    return fields


def _raise_size_error(raw: bytes, header: Tuple[int, ...], expected: int) -> None:
    batch, window, features = header[:3]
    float_bytes = len(raw) - HEADER_SIZE - 2 * batch
    per_row = window * 4
    if float_bytes > 0 and float_bytes % (batch * per_row) == 0:
        actual = float_bytes // (batch * per_row)
        raise DatasetFormatError(
            f"dimension mismatch: header F={features} but payload holds {actual} floats per row",
            HEADER_SIZE)
    if len(raw) < expected:
        raise DatasetFormatError(f"truncated file: {len(raw)} of {expected} declared bytes", len(raw))
    raise DatasetFormatError(f"{len(raw) - expected} trailing bytes after declared payload", expected)
