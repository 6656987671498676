"""
Multi-scale masked temporal encoder.

Windows are projected to a hidden space and read by two multi-head
attention branches: one restricted to a band of neighbouring time steps,
one to a periodic subset of anchor steps. The concatenated branch outputs
are fused and pooled over time by an additive attention head.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .numcore import (Tensor, additive_mask, concat, linear, mask_allowed, masked_softmax,
                      masked_softmax_attention, relu, reshape, tanh, transpose)
from .param_store import ParamStore, glorot

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TemporalMask:
    """A T x T additive mask over {0, sentinel}."""
    kind: str  # "local" or "sparse"
    parameter: int  # window w or period p
    matrix: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def allowed(self) -> np.ndarray:
        return mask_allowed(self.matrix)

    def as_binary(self) -> np.ndarray:
        """1 where attention is allowed, 0 where masked."""
        return self.allowed.astype(np.int64)


def build_local_mask(window: int, radius: int) -> TemporalMask:
    """Banded mask: step i attends to j iff |i - j| <= radius."""
    if window < 1:
        raise ValueError(f"Sequence length must be >= 1, got {window}")
    if radius < 0:
        raise ValueError(f"Local window must be >= 0, got {radius}")
    steps = np.arange(window)
    allowed = np.abs(steps[:, None] - steps[None, :]) <= radius
    return TemporalMask("local", radius, additive_mask(allowed))


def build_sparse_mask(window: int, period: int) -> TemporalMask:
    """Periodic mask: step i attends to itself and to every j with j mod period == 0."""
    if window < 1:
        raise ValueError(f"Sequence length must be >= 1, got {window}")
    if period < 1:
        raise ValueError(f"Sparse period must be >= 1, got {period}")
    steps = np.arange(window)
    allowed = (steps[None, :] % period == 0) | np.eye(window, dtype=bool)
    return TemporalMask("sparse", period, additive_mask(allowed))


@dataclass
class TemporalOutput:
    fused: Tensor  # (B, T, H)
    a_temporal: Tensor  # (B, T)
    z: Tensor  # (B, H)
    local: Optional[Tensor] = None
    sparse: Optional[Tensor] = None
    local_weights: Optional[Tensor] = None  # (B, heads, T, T)
    sparse_weights: Optional[Tensor] = None


def multi_head_branch(h: Tensor, weights: Dict[str, Tensor], mask: TemporalMask, heads: int):
    """
    Masked multi-head self-attention over time followed by the output projection.

    Args:
        h: (B, T, H) hidden sequence
        weights: ``W_Q``, ``W_K``, ``W_V``, ``W_o`` (each H x H)
        mask: Temporal mask for this branch
        heads: Head count; H must be divisible by it

    Returns:
        Tuple of ((B, T, H) branch output, (B, heads, T, T) attention weights)
    """
    batch, window, hidden = h.shape
    if hidden % heads:
        raise ValueError(f"Hidden width {hidden} is not divisible by {heads} heads")
    if mask.size != window:
        raise ValueError(f"{mask.kind} mask is built for T={mask.size}, input has T={window}")
    d_k = hidden // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, window, heads, d_k)), (0, 2, 1, 3))

    q = split(linear(h, weights["W_Q"]))
    k = split(linear(h, weights["W_K"]))
    v = split(linear(h, weights["W_V"]))
    attended, attention = masked_softmax_attention(q, k, v, mask.matrix, d_k)
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch, window, hidden))
    return linear(merged, weights["W_o"]), attention


def attention_pool(fused: Tensor, w_a: Tensor, v_a: Tensor):
    """a = softmax_t(v_a . tanh(W_a h_t)), z = sum_t a_t h_t."""
    batch, window, hidden = fused.shape
    scores = reshape(linear(tanh(linear(fused, w_a)), v_a), (batch, window))
    a_temporal = masked_softmax(scores, None, axis=-1)
    z = (reshape(a_temporal, (batch, window, 1)) * fused).sum(axis=1)
    return a_temporal, z


def mstt_forward(x: Tensor, params: Dict[str, Tensor], local_mask: TemporalMask,
                 sparse_mask: TemporalMask, heads: int, tied: bool = True) -> TemporalOutput:
    """
    Full temporal encoder on (B, T, F) input.

    Args:
        x: Spatially enhanced sequence
        params: ``W_p``, ``W_f``, ``W_a``, ``v_a`` and the branch weights, either
            shared (``W_Q`` ...) or per branch (``local/W_Q``, ``sparse/W_Q`` ...)
        local_mask: Banded mask for the local branch
        sparse_mask: Periodic mask for the global branch
        heads: Attention heads per branch
        tied: Whether both branches share their projections

    Returns:
        TemporalOutput with fused sequence, temporal weights and pooled vector
    """
    hidden = linear(x, params["W_p"])
    branch = {}
    for name in ("local", "sparse"):
        prefix = "" if tied else f"{name}/"
        branch[name] = {key: params[prefix + key] for key in ("W_Q", "W_K", "W_V", "W_o")}
    h_local, w_local = multi_head_branch(hidden, branch["local"], local_mask, heads)
    h_sparse, w_sparse = multi_head_branch(hidden, branch["sparse"], sparse_mask, heads)
    fused = relu(linear(concat([h_local, h_sparse], axis=-1), params["W_f"]))
    a_temporal, z = attention_pool(fused, params["W_a"], params["v_a"])
    return TemporalOutput(fused, a_temporal, z, h_local, h_sparse, w_local, w_sparse)


class TemporalEncoder:
    """Parameters, masks and forward pass of the temporal encoder."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, window: int, feature_dim: int,
                 hidden: int = 64, heads: int = 8, local_window: int = 2, sparse_period: Optional[int] = None,
                 tied: bool = True, prefix: str = "mstt/", enabled: bool = True):
        if hidden % heads:
            raise ValueError(f"Hidden width {hidden} is not divisible by {heads} heads")
        self.window = window
        self.hidden = hidden
        self.heads = heads
        self.tied = tied
        self.enabled = enabled
        period = sparse_period or max(1, window // 4)
        self.local_mask = build_local_mask(window, local_window)
        self.sparse_mask = build_sparse_mask(window, period)

        self.params: Dict[str, Tensor] = {"W_p": store.add(prefix + "W_p", glorot(rng, hidden, feature_dim))}
        if enabled:
            branch_prefixes = [""] if tied else ["local/", "sparse/"]
            for branch in branch_prefixes:
                for key in ("W_Q", "W_K", "W_V", "W_o"):
                    self.params[branch + key] = store.add(prefix + branch + key, glorot(rng, hidden, hidden))
            self.params["W_f"] = store.add(prefix + "W_f", glorot(rng, hidden, 2 * hidden))
        self.params["W_a"] = store.add(prefix + "W_a", glorot(rng, hidden, hidden))
        self.params["v_a"] = store.add(prefix + "v_a", glorot(rng, 1, hidden))
        logger.debug(f"Temporal encoder: T={window}, H={hidden}, heads={heads}, d_k={hidden // heads}, "
                     f"w={local_window}, p={period}, tied={tied}, enabled={enabled}")

    @property
    def d_k(self) -> int:
        return self.hidden // self.heads

    def forward(self, x: Tensor) -> TemporalOutput:
        if x.shape[1] != self.window:
            raise ValueError(f"Encoder built for T={self.window}, input has T={x.shape[1]}")
        if not self.enabled:
            fused = relu(linear(x, self.params["W_p"]))
            a_temporal, z = attention_pool(fused, self.params["W_a"], self.params["v_a"])
            return TemporalOutput(fused, a_temporal, z)
        return mstt_forward(x, self.params, self.local_mask, self.sparse_mask, self.heads, self.tied)
