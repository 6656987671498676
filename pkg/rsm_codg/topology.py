"""
Electrode topology for the 62-channel 10-20 montage.

This module holds the canonical electrode order and its partition into six
functional brain regions. The partition is compiled-in data: every tensor in
the package uses this electrode order, and the region index sets act as the
structural mask of the spatial encoder.
"""

import csv
import io
import logging
from typing import Dict, List, Optional, TextIO

import numpy as np

from .models import Electrode, RegionPartition

logger = logging.getLogger(__name__)

REGION_NAMES = ("frontal", "central", "parietal", "temporal_left", "temporal_right", "occipital")

_REGION_LABELS = (
    ("frontal", ("FP1", "FPZ", "FP2", "AF3", "AF4", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8")),
    ("central", ("FC3", "FC1", "FCZ", "FC2", "FC4", "C3", "C1", "CZ", "C2", "C4")),
    ("parietal", ("CP3", "CP1", "CPZ", "CP2", "CP4", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8")),
    ("temporal_left", ("FT7", "FC5", "T7", "C5", "TP7", "CP5")),
    ("temporal_right", ("FC6", "FT8", "C6", "T8", "CP6", "TP8")),
    ("occipital", ("PO7", "PO5", "PO3", "POZ", "PO4", "PO6", "PO8", "CB1", "O1", "OZ", "O2", "CB2")),
)

# Row-major listing of the region table above.
CHANNEL_NAMES: List[str] = [label for _, labels in _REGION_LABELS for label in labels]
BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma")

N_ELECTRODES = 62
N_BANDS = 5
FEATURE_DIM = N_ELECTRODES * N_BANDS

EXPECTED_SIZES = (14, 10, 14, 6, 6, 12)

ELECTRODES: List[Electrode] = [Electrode(index=i, label=label) for i, label in enumerate(CHANNEL_NAMES)]
_INDEX_BY_LABEL: Dict[str, int] = {e.label: e.index for e in ELECTRODES}


class UnknownElectrodeError(KeyError):
    """Raised when a channel label is not one of the 62 canonical names."""

    def __init__(self, label: str):
        super().__init__(label)
        self.label = label

    def __str__(self) -> str:
        return f"Unknown electrode label: {self.label!r}"


def _build_default_partition() -> RegionPartition:
    regions = []
    for name, labels in _REGION_LABELS:
        regions.append((name, tuple(_INDEX_BY_LABEL[label] for label in labels)))
    return RegionPartition(regions=tuple(regions))


DEFAULT_PARTITION = _build_default_partition()


def electrode_index(label: str) -> int:
    """Canonical index of a channel label (case-insensitive)."""
    key = label.strip().upper() if isinstance(label, str) else label
    if key not in _INDEX_BY_LABEL:
        raise UnknownElectrodeError(label)
    return _INDEX_BY_LABEL[key]


def region_of(label: str, partition: Optional[RegionPartition] = None) -> str:
    """
    Return the region containing an electrode.

    Args:
        label: Canonical channel name, e.g. "FP1"
        partition: Partition to consult, defaults to the built-in one

    Returns:
        Region name

    Raises:
        UnknownElectrodeError: If the label is not a canonical channel name
    """
    index = electrode_index(label)
    partition = partition or DEFAULT_PARTITION
    for name, members in partition.regions:
        if index in members:
            return name
    raise UnknownElectrodeError(label)


def validate_partition(partition: RegionPartition, n_electrodes: int = N_ELECTRODES) -> List[str]:
    """
    Check a partition against the region invariants.

    Returns:
        Empty list when the partition is valid, otherwise one message per
        violated invariant
    """
    violations: List[str] = []
    seen: Dict[int, str] = {}
    duplicated: List[str] = []
    out_of_range: List[int] = []

    for name, members in partition.regions:
        for index in members:
            if not 0 <= index < n_electrodes:
                out_of_range.append(index)
                continue
            if index in seen:
                duplicated.append(f"{_label(index)} in {seen[index]} and {name}")
            else:
                seen[index] = name

    if duplicated:
        violations.append("not disjoint: " + "; ".join(duplicated))
    missing = sorted(set(range(n_electrodes)) - set(seen))
    if missing:
        violations.append("union incomplete: missing " + ", ".join(_label(i) for i in missing))
    if out_of_range:
        violations.append(f"indices out of range: {sorted(set(out_of_range))}")

    names = tuple(partition.names)
    if names != REGION_NAMES:
        violations.append(f"region names/order {list(names)} differ from {list(REGION_NAMES)}")
    sizes = tuple(partition.sizes())
    if sizes != EXPECTED_SIZES:
        violations.append(f"region sizes {list(sizes)} differ from {list(EXPECTED_SIZES)}")

    if violations:
        logger.debug(f"Partition violations: {violations}")
    return violations


def region_matrix(partition: Optional[RegionPartition] = None, n_electrodes: int = N_ELECTRODES) -> np.ndarray:
    """Boolean (N, N) matrix, True where two electrodes share a region."""
    owner = (partition or DEFAULT_PARTITION).membership(n_electrodes)
    return (owner[:, None] == owner[None, :]) & (owner[:, None] >= 0)


def dump_partition(stream: Optional[TextIO] = None, partition: Optional[RegionPartition] = None) -> str:
    """Write the partition as a two-column CSV (label, region) and return the text."""
    partition = partition or DEFAULT_PARTITION
    owner = partition.membership(N_ELECTRODES)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["label", "region"])
    for electrode in ELECTRODES:
        position = owner[electrode.index]
        writer.writerow([electrode.label, partition.regions[position][0] if position >= 0 else ""])
    text = buffer.getvalue()
    if stream is not None:
        stream.write(text)
    return text


def feature_labels() -> List[str]:
    """Column names of the flattened electrode-major feature vector."""
    return [f"{label}_{band}" for label in CHANNEL_NAMES for band in BAND_NAMES]


def _label(index: int) -> str:
    return CHANNEL_NAMES[index] if 0 <= index < N_ELECTRODES else str(index)
