"""
Data models for the RSM-CoDG pipeline.

This module defines the core data structures passed between stages:
electrode topology records, windowed feature datasets, the synthetic
generator specification, training configuration and per-fold reports.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np


@dataclass(frozen=True)
class Electrode:
    """One scalp channel of the 62-electrode 10-20 montage."""
    index: int
    label: str


@dataclass(frozen=True)
class RegionPartition:
    """Ordered functional regions, each an index set over the electrodes."""
    regions: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.regions]

    def indices(self, name: str) -> Tuple[int, ...]:
        for region_name, members in self.regions:
            if region_name == name:
                return members
        raise KeyError(f"Unknown region: {name!r}")

    def sizes(self) -> List[int]:
        return [len(members) for _, members in self.regions]

    def membership(self, n_electrodes: int) -> np.ndarray:
        """Region position of every electrode, -1 where none claims it."""
        owner = np.full(n_electrodes, -1, dtype=np.int64)
        for position, (_, members) in enumerate(self.regions):
            for index in members:
                if 0 <= index < n_electrodes:
                    owner[index] = position
        return owner


@dataclass
class Trial:
    """One continuous recording: (L, F) feature rows sharing a label and subject."""
    values: np.ndarray
    label: int
    subject: int
    name: str = ""


@dataclass
class Dataset:
    """Windowed differential-entropy samples with labels and subject ids."""
    samples: np.ndarray  # (B, T, F)
    labels: np.ndarray  # (B,)
    subjects: np.ndarray  # (B,)
    classes: int
    class_names: List[str] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.samples.ndim != 3:
            raise ValueError(f"Samples must be rank 3 (batch, time, feature), got shape {self.samples.shape}")
        batch = self.samples.shape[0]
        if len(self.labels) != batch or len(self.subjects) != batch:
            raise ValueError(
                f"Length mismatch: {batch} samples, {len(self.labels)} labels, {len(self.subjects)} subject ids"
            )
        if self.classes < 1:
            raise ValueError(f"Class count must be positive, got {self.classes}")
        if batch and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"Labels must lie in [0, {self.classes})")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Samples contain non-finite values")
        if not self.class_names:
            self.class_names = [f"class_{c}" for c in range(self.classes)]

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def window(self) -> int:
        return self.samples.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.samples.shape[2]

    @property
    def subject_ids(self) -> List[int]:
        return sorted(int(s) for s in np.unique(self.subjects))

    def select(self, index: np.ndarray) -> "Dataset":
        """Return the subset at ``index`` (boolean mask or integer positions)."""
        return Dataset(
            samples=self.samples[index],
            labels=self.labels[index],
            subjects=self.subjects[index],
            classes=self.classes,
            class_names=list(self.class_names),
            provenance=dict(self.provenance),
        )

    def with_samples(self, samples: np.ndarray) -> "Dataset":
        return Dataset(samples, self.labels, self.subjects, self.classes,
                       list(self.class_names), dict(self.provenance))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic multi-subject generator."""
    subjects: int = 6
    classes: int = 3
    per_subject: int = 200
    window: int = 10
    snr: float = 2.0
    shift: float = 2.0
    seed: int = 3

    def __post_init__(self):
        for name in ("subjects", "classes", "per_subject", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"SynthSpec.{name} must be >= 1, got {getattr(self, name)}")
        if self.subjects > 255:
            raise ValueError("SynthSpec.subjects must fit in one byte (<= 255)")
        if self.classes > 255:
            raise ValueError("SynthSpec.classes must fit in one byte (<= 255)")
        if not self.snr > 0:
            raise ValueError(f"SynthSpec.snr must be positive, got {self.snr}")
        if self.shift < 0:
            raise ValueError(f"SynthSpec.shift must be non-negative, got {self.shift}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        if math.isinf(self.snr):
            data["snr"] = "inf"
        return data


@dataclass(frozen=True)
class TrainConfig:
    """Effective training hyperparameters for one run."""
    lr: float = 1e-4
    weight_decay: float = 5e-4
    align_lr_scale: float = 0.01
    step_size: int = 15
    gamma: float = 0.7
    epochs: int = 120
    batch_size: int = 64
    noise_std: float = 0.12
    seed: int = 3
    patience: int = 20
    val_fraction: float = 0.1
    hidden: int = 64
    heads: int = 8
    local_window: int = 2
    sparse_period: Optional[int] = None
    tie_branches: bool = True
    embed_dim: int = 32
    classifier_hidden: int = 64
    dropout: float = 0.4
    layer_norm_eps: float = 1e-5
    bn_momentum: float = 0.1
    lambda_contrast: float = 1.0
    lambda_orth: float = 0.01
    lambda_mmd: float = 1.0
    lambda_align: float = 0.1
    temperature: float = 0.5
    no_align: bool = False
    no_rgrm: bool = False
    no_mstt: bool = False
    no_codg: bool = False
    no_mmd: bool = False
    no_contrast: bool = False
    no_orth: bool = False

    @classmethod
    def from_config(cls, config: Dict[str, Any]) -> "TrainConfig":
        """Build from the nested configuration dictionary."""
        model = config.get("model", {})
        training = config.get("training", {})
        loss = config.get("loss", {})
        ablation = config.get("ablation", {})
        no_codg = bool(ablation.get("no_codg", False))
        return cls(
            lr=float(training.get("lr", cls.lr)),
            weight_decay=float(training.get("weight_decay", cls.weight_decay)),
            align_lr_scale=float(training.get("align_lr_scale", cls.align_lr_scale)),
            step_size=int(training.get("step_size", cls.step_size)),
            gamma=float(training.get("gamma", cls.gamma)),
            epochs=int(training.get("epochs", cls.epochs)),
            batch_size=int(training.get("batch_size", cls.batch_size)),
            noise_std=float(training.get("noise_std", cls.noise_std)),
            seed=int(training.get("seed", cls.seed)),
            patience=int(training.get("patience", cls.patience)),
            val_fraction=float(training.get("val_fraction", cls.val_fraction)),
            hidden=int(model.get("hidden", cls.hidden)),
            heads=int(model.get("heads", cls.heads)),
            local_window=int(model.get("local_window", cls.local_window)),
            sparse_period=int(model["sparse_period"]) if model.get("sparse_period") else None,
            tie_branches=bool(model.get("tie_branches", cls.tie_branches)),
            embed_dim=int(model.get("embed_dim", cls.embed_dim)),
            classifier_hidden=int(model.get("classifier_hidden", cls.classifier_hidden)),
            dropout=float(model.get("dropout", cls.dropout)),
            layer_norm_eps=float(model.get("layer_norm_eps", cls.layer_norm_eps)),
            bn_momentum=float(model.get("bn_momentum", cls.bn_momentum)),
            lambda_contrast=float(loss.get("contrast", cls.lambda_contrast)),
            lambda_orth=float(loss.get("orth", cls.lambda_orth)),
            lambda_mmd=float(loss.get("mmd", cls.lambda_mmd)),
            lambda_align=float(loss.get("align", cls.lambda_align)),
            temperature=float(loss.get("temperature", cls.temperature)),
            no_align=bool(ablation.get("no_align", False)),
            no_rgrm=bool(ablation.get("no_rgrm", False)),
            no_mstt=bool(ablation.get("no_mstt", False)),
            no_codg=no_codg,
            no_mmd=no_codg or bool(ablation.get("no_mmd", False)),
            no_contrast=no_codg or bool(ablation.get("no_contrast", False)),
            no_orth=no_codg or bool(ablation.get("no_orth", False)),
        )

    def period_for(self, window: int) -> int:
        """Sparse-mask period, defaulting to max(1, floor(T / 4))."""
        if self.sparse_period:
            return int(self.sparse_period)
        return max(1, window // 4)

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def ablations(self) -> List[str]:
        names = ["no_align", "no_rgrm", "no_mstt", "no_codg", "no_mmd", "no_contrast", "no_orth"]
        return [name for name in names if getattr(self, name)]


@dataclass
class FoldReport:
    """Metrics and metadata for one held-out subject."""
    held_out_subject: int
    accuracy: float
    macro_f1: float
    sensitivity: float
    specificity: float
    confusion: List[List[int]]
    config_hash: str
    epochs_run: int
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    n_test: int = 0
    per_class: Dict[str, Any] = field(default_factory=dict)
    diagnostics: Dict[str, int] = field(default_factory=dict)
    audit_passed: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FoldReport":
        return cls(**data)
