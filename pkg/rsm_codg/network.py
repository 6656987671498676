"""
Model assembly.

Wires subject alignment, the region-aware spatial encoder, the temporal
encoder and the domain-generalisation head into one network over a shared
ParamStore, honouring the architectural and loss ablation switches.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .align import AlignmentBank
from .codg import CodgHead, Diagnostics, LossBundle, contrastive_loss, mmd_loss, nll, orthogonal_loss, total_loss
from .models import RegionPartition, TrainConfig
from .mstt import TemporalEncoder, TemporalOutput
from .numcore import GradCheckResult, Tensor, grad_check, reshape
from .param_store import ParamStore, make_rng
from .rgrm import RegionEncoder, SpatialOutput
from .topology import DEFAULT_PARTITION, N_BANDS, N_ELECTRODES

logger = logging.getLogger(__name__)


@dataclass
class ForwardOutput:
    log_probs: Tensor  # (B, C)
    features: Tensor  # (B, H), f_orth or z under no_codg
    spatial: SpatialOutput
    temporal: TemporalOutput


class RsmCodgNetwork:
    """The full network and its parameters for one training fold."""

    def __init__(self, config: TrainConfig, subjects: Sequence[int], classes: int, window: int,
                 n_electrodes: int = N_ELECTRODES, n_bands: int = N_BANDS,
                 partition: RegionPartition = DEFAULT_PARTITION, dtype=np.float32):
        self.config = config
        self.classes = classes
        self.window = window
        self.feature_dim = n_electrodes * n_bands
        self.store = ParamStore(dtype)
        self.diagnostics = Diagnostics()
        seed = config.seed

        self.bank = None if config.no_align else AlignmentBank(self.store, subjects, self.feature_dim)
        self.spatial = RegionEncoder(self.store, make_rng(seed, "init/rgrm"), n_electrodes, n_bands, partition,
                                     config.layer_norm_eps, enabled=not config.no_rgrm)
        self.temporal = TemporalEncoder(self.store, make_rng(seed, "init/mstt"), window, self.feature_dim,
                                        config.hidden, config.heads, config.local_window,
                                        config.period_for(window), config.tie_branches,
                                        enabled=not config.no_mstt)
        self.head = CodgHead(self.store, make_rng(seed, "init/codg"), config.hidden, self.feature_dim, window,
                             classes, config.embed_dim, config.classifier_hidden, config.dropout,
                             config.bn_momentum, config.layer_norm_eps, invariant=not config.no_codg)
        ablations = ", ".join(config.ablations()) or "none"
        logger.info(f"Network built: {len(self.store)} tensors, {self.store.count()} parameters, "
                    f"ablations: {ablations}")

    def forward(self, samples: np.ndarray, subjects: Optional[np.ndarray] = None, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> ForwardOutput:
        """
        Run the network on a (B, T, F) batch.

        Args:
            samples: Raw (normalised) features
            subjects: Subject id per sample; when given, each sample is
                calibrated with its own matrix, otherwise with the bank mean
            train: Batch statistics in batch-norm and dropout active
            rng: Dropout stream; dropout is skipped without one

        Returns:
            ForwardOutput with log-probabilities and intermediate tensors
        """
        x = Tensor(np.asarray(samples, dtype=self.store.dtype))
        batch, window, features = x.shape
        if window != self.window or features != self.feature_dim:
            raise ValueError(f"Network expects (B, {self.window}, {self.feature_dim}), got {x.shape}")
        if self.bank is not None:
            x = self.bank.calibrate_train(x, subjects) if subjects is not None else self.bank.calibrate_test(x)
        spatial = self.spatial.forward(x)
        temporal = self.temporal.forward(reshape(spatial.enhanced, (batch, window, features)))
        features_out = self.head.features(temporal.z)
        log_probs = self.head.classify(features_out, train, rng)
        return ForwardOutput(log_probs, features_out, spatial, temporal)

    def losses(self, output: ForwardOutput, labels: np.ndarray, subjects: np.ndarray) -> LossBundle:
        """All loss terms for a forward pass; switched-off terms are exact zeros."""
        config = self.config
        zero = Tensor(np.zeros((), dtype=self.store.dtype))
        cls = nll(output.log_probs, labels)
        contrast = zero if config.no_contrast else contrastive_loss(
            self.head.embed(output.spatial.a_spatial, output.temporal.a_temporal),
            subjects, config.temperature, self.diagnostics)
        orth = zero if config.no_orth else orthogonal_loss(output.features, self.diagnostics)
        mmd = zero if config.no_mmd else mmd_loss(output.features, subjects)
        align = None if self.bank is None else self.bank.identity_penalty()
        return total_loss(cls, contrast, orth, mmd, config.lambda_contrast, config.lambda_orth, config.lambda_mmd,
                          align, config.lambda_align)

    def predict_log_probs(self, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode log-probabilities with the mean calibration, in chunks."""
        chunks = [self.forward(samples[start:start + batch_size]).log_probs.data
                  for start in range(0, len(samples), batch_size)]
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, self.classes))

    def predict(self, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return np.argmax(self.predict_log_probs(samples, batch_size), axis=1)

    def validation_loss(self, samples: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
        """Eval-mode classification loss averaged over all samples."""
        log_probs = self.predict_log_probs(samples, batch_size)
        return float(-log_probs[np.arange(len(labels)), labels].mean())

    def spatial_attention(self, samples: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode (B, F) spatial attention weights."""
        chunks = []
        for start in range(0, len(samples), batch_size):
            x = Tensor(np.asarray(samples[start:start + batch_size], dtype=self.store.dtype))
            if self.bank is not None:
                x = self.bank.calibrate_test(x)
            chunks.append(self.spatial.forward(x).a_spatial.data)
        return np.concatenate(chunks, axis=0)


def gradcheck_config(**overrides) -> TrainConfig:
    """Tiny architecture used by the gradient check."""
    values = dict(hidden=8, heads=2, embed_dim=4, classifier_hidden=6, dropout=0.0, noise_std=0.0)
    values.update(overrides)
    return TrainConfig(**values)


def check_gradients(n_coords: int = 50, seed: int = 3, window: int = 4, dropout: float = 0.0,
                    tolerance: float = 1e-4) -> GradCheckResult:
    """
    Finite-difference check of the full 64-bit network through L_total.

    Three subjects and three classes keep every loss term active; dropout and
    noise injection stay off.

    Raises:
        ValueError: If dropout is requested or n_coords < 1
    """
    if n_coords < 1:
        raise ValueError(f"Number of checked coordinates must be >= 1, got {n_coords}")
    if dropout > 0:
        raise ValueError("Gradient check requires dropout to be disabled")
    config = gradcheck_config(seed=seed, dropout=dropout)
    subjects = np.repeat(np.arange(3), 4)
    labels = np.tile(np.arange(3), 4)
    data_rng = make_rng(seed, "gradcheck/data")
    samples = data_rng.uniform(0.0, 1.0, size=(len(labels), window, N_ELECTRODES * N_BANDS))

    network = RsmCodgNetwork(config, [0, 1, 2], classes=3, window=window, dtype=np.float64)
    # nudge the alignment matrices off identity so their gradients differ per subject
    for subject, matrix in network.bank.matrices().items():
        matrix.data += 0.01 * make_rng(seed, f"gradcheck/align/{subject}").standard_normal(matrix.shape)
    network.store.bump()

    def loss_fn() -> Tensor:
        output = network.forward(samples, subjects, train=True, rng=None)
        return network.losses(output, labels, subjects).total

    params = dict(network.store.items())
    return grad_check(loss_fn, params, n_coords, make_rng(seed, "gradcheck/coords"), tolerance=tolerance)
