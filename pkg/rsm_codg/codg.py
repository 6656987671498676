"""
Domain-generalisation head and losses.

The pooled temporal vector passes through a domain-invariant extractor and a
bias-free orthogonal projection before classification. Three regularisers
act on a batch drawn from several source subjects: a first-moment distance
between per-subject feature means, an InfoNCE-style consistency loss on the
attention embeddings, and a covariance-to-identity penalty.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, Optional

import numpy as np

from .numcore import (Tensor, batch_norm, concat, dropout, getitem, l2_normalize, layer_norm, linear,
                      log_softmax, masked_logsumexp, matmul, relu, row_norm, stack, swap_last)
from .param_store import ParamStore, glorot, ones, orthogonal, zeros

logger = logging.getLogger(__name__)


@dataclass
class Diagnostics:
    """Counts of batches where a regulariser had nothing to measure."""
    contrast_no_anchor: int = 0
    orth_small_batch: int = 0

    def to_dict(self) -> Dict[str, int]:
        return {"contrast_no_anchor": self.contrast_no_anchor, "orth_small_batch": self.orth_small_batch}


@dataclass
class LossBundle:
    """The loss terms of one step and their weighted sum."""
    cls: Tensor
    contrast: Tensor
    orth: Tensor
    mmd: Tensor
    total: Tensor
    weights: Dict[str, float] = field(default_factory=dict)
    align: Optional[Tensor] = None

    def as_floats(self) -> Dict[str, float]:
        return {
            "loss_total": self.total.item(),
            "loss_cls": self.cls.item(),
            "loss_contrast": self.contrast.item(),
            "loss_orth": self.orth.item(),
            "loss_mmd": self.mmd.item(),
            "loss_align": 0.0 if self.align is None else self.align.item(),
        }


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((), dtype=like.dtype))


def invariant_features(z: Tensor, params: Dict[str, Tensor], eps: float = 1e-5) -> Tensor:
    """f_orth = ReLU(LayerNorm(z W_inv^T + b_inv)) W_orth^T."""
    f_inv = relu(layer_norm(linear(z, params["W_inv"], params["b_inv"]), params["ln_gain"], params["ln_bias"], eps))
    return linear(f_inv, params["W_orth"])


def attention_embedding(a_spatial: Tensor, a_temporal: Tensor, params: Dict[str, Tensor]) -> Tensor:
    """Concatenate the spatial and temporal attention encoders' outputs, (B, 2 * d_e)."""
    e_spatial = relu(linear(a_spatial, params["W_sp"], params["b_sp"]))
    e_temporal = relu(linear(a_temporal, params["W_tp"], params["b_tp"]))
    return concat([e_spatial, e_temporal], axis=-1)


def mmd_loss(features: Tensor, subjects: np.ndarray) -> Tensor:
    """
    Mean Euclidean distance between per-subject feature means.

    Averaged over every unordered pair of distinct subjects in the batch;
    zero when fewer than two subjects are present.
    """
    subjects = np.asarray(subjects)
    present = np.unique(subjects)
    if len(present) < 2:
        return _zero(features)
    means = stack([getitem(features, np.nonzero(subjects == s)[0]).mean(axis=0) for s in present], axis=0)
    pairs = np.array(list(combinations(range(len(present)), 2)))
    gaps = getitem(means, pairs[:, 0]) - getitem(means, pairs[:, 1])
    return row_norm(gaps, axis=-1).mean()


def contrastive_loss(embeddings: Tensor, subjects: np.ndarray, temperature: float,
                     diagnostics: Optional[Diagnostics] = None) -> Tensor:
    """
    InfoNCE-style subject-consistency loss over cosine similarities.

    Positives of anchor i are the other samples of its subject, negatives the
    samples of other subjects. Each valid anchor contributes
    ``logsumexp(neg) - logsumexp(pos)`` of the tempered similarities; anchors
    lacking positives or negatives are left out of the mean.

    Raises:
        ValueError: If temperature is not positive
    """
    if temperature <= 0:
        raise ValueError(f"Temperature must be positive, got {temperature}")
    subjects = np.asarray(subjects)
    same = subjects[:, None] == subjects[None, :]
    positive = same & ~np.eye(len(subjects), dtype=bool)
    negative = ~same
    valid = np.nonzero(positive.any(axis=1) & negative.any(axis=1))[0]
    if len(valid) == 0:
        if diagnostics is not None:
            diagnostics.contrast_no_anchor += 1
        logger.warning("Contrastive loss: batch has no anchor with both positives and negatives")
        return _zero(embeddings)

    unit = l2_normalize(embeddings, axis=-1)
    similarity = matmul(getitem(unit, valid), swap_last(unit)) * (1.0 / temperature)
    log_positive = masked_logsumexp(similarity, positive[valid], axis=-1)
    log_negative = masked_logsumexp(similarity, negative[valid], axis=-1)
    return (log_negative - log_positive).mean()


def orthogonal_loss(features: Tensor, diagnostics: Optional[Diagnostics] = None) -> Tensor:
    """||R - I||_F^2 for the sample correlation-style matrix R = Fc^T Fc / (B - 1)."""
    batch, width = features.shape
    if batch < 2:
        if diagnostics is not None:
            diagnostics.orth_small_batch += 1
        logger.warning(f"Orthogonal loss needs at least 2 samples, got {batch}")
        return _zero(features)
    centered = features - features.mean(axis=0, keepdims=True)
    gram = matmul(swap_last(centered), centered) * (1.0 / (batch - 1))
    residual = gram - Tensor(np.eye(width, dtype=features.dtype))
    return (residual * residual).sum()


def classify(features: Tensor, params: Dict[str, Tensor], running_mean: np.ndarray, running_var: np.ndarray,
             train: bool, rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.4,
             momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Linear -> batch-norm -> ReLU -> dropout -> linear -> log-softmax."""
    h = linear(features, params["W_c1"], params["b_c1"])
    h = batch_norm(h, params["bn_gain"], params["bn_bias"], running_mean, running_var, train, momentum, eps)
    h = dropout(relu(h), dropout_rate, rng, train)
    return log_softmax(linear(h, params["W_c2"], params["b_c2"]), axis=-1)


def nll(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Negative mean log-likelihood of the true labels."""
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = log_probs.shape
    if len(labels) != batch:
        raise ValueError(f"{len(labels)} labels for a batch of {batch}")
    if len(labels) and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return -getitem(log_probs, (np.arange(batch), labels)).mean()


def total_loss(cls: Tensor, contrast: Tensor, orth: Tensor, mmd: Tensor,
               lambda_contrast: float, lambda_orth: float, lambda_mmd: float,
               align: Optional[Tensor] = None, lambda_align: float = 0.0) -> LossBundle:
    """
    L_total = L_cls + l1 * L_contrast + l2 * L_orth + l3 * L_mmd, plus
    lambda_align * L_align when an alignment penalty is given.
    """
    weights = {"contrast": lambda_contrast, "orth": lambda_orth, "mmd": lambda_mmd, "align": lambda_align}
    for name, value in weights.items():
        if value < 0:
            raise ValueError(f"Loss weight {name} must be non-negative, got {value}")
    total = cls + lambda_contrast * contrast + lambda_orth * orth + lambda_mmd * mmd
    if align is not None and lambda_align:
        total = total + lambda_align * align
    return LossBundle(cls, contrast, orth, mmd, total, weights, align)


class CodgHead:
    """Invariant extractor, attention encoders and classifier parameters."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, hidden: int, feature_dim: int, window: int,
                 classes: int, embed_dim: int = 32, classifier_hidden: int = 64, dropout_rate: float = 0.4,
                 momentum: float = 0.1, eps: float = 1e-5, prefix: str = "codg/", invariant: bool = True):
        self.store = store
        self.dropout_rate = dropout_rate
        self.momentum = momentum
        self.eps = eps
        self.invariant = invariant
        self.params: Dict[str, Tensor] = {}

        def add(name: str, value: np.ndarray) -> None:
            self.params[name] = store.add(prefix + name, value)

        if invariant:
            add("W_inv", glorot(rng, hidden, hidden))
            add("b_inv", zeros(hidden))
            add("ln_gain", ones(hidden))
            add("ln_bias", zeros(hidden))
            add("W_orth", orthogonal(rng, hidden))
        add("W_sp", glorot(rng, embed_dim, feature_dim))
        add("b_sp", zeros(embed_dim))
        add("W_tp", glorot(rng, embed_dim, window))
        add("b_tp", zeros(embed_dim))
        add("W_c1", glorot(rng, classifier_hidden, hidden))
        add("b_c1", zeros(classifier_hidden))
        add("bn_gain", ones(classifier_hidden))
        add("bn_bias", zeros(classifier_hidden))
        add("W_c2", glorot(rng, classes, classifier_hidden))
        add("b_c2", zeros(classes))
        self.running_mean = store.add_buffer(prefix + "bn_running_mean", zeros(classifier_hidden))
        self.running_var = store.add_buffer(prefix + "bn_running_var", ones(classifier_hidden))

    def features(self, z: Tensor) -> Tensor:
        return invariant_features(z, self.params, self.eps) if self.invariant else z

    def embed(self, a_spatial: Tensor, a_temporal: Tensor) -> Tensor:
        return attention_embedding(a_spatial, a_temporal, self.params)

    def classify(self, features: Tensor, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
        return classify(features, self.params, self.running_mean, self.running_var, train, rng,
                        self.dropout_rate, self.momentum, self.eps)
