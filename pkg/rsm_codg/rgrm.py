"""
Region-aware spatial encoder.

Each time step's (N, D) electrode-by-band matrix is projected to queries,
keys and values in band space. Two branches read only within each
functional region: a continuous branch that averages the region's values
and a sparse branch that copies the value of the single most similar other
electrode. A learned scalar gate mixes them; the mix is pooled over
electrodes, projected, added back to every electrode and layer-normalised.
A separate sigmoid head turns the enhanced features into per-feature
spatial attention weights averaged over time.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .models import RegionPartition
from .numcore import Tensor, getitem, layer_norm, linear, matmul, reshape, sigmoid
from .param_store import ParamStore, glorot, identity, ones, zeros
from .topology import DEFAULT_PARTITION, region_matrix

logger = logging.getLogger(__name__)


@dataclass
class SpatialOutput:
    """Enhanced features and spatial attention of one forward pass."""
    enhanced: Tensor  # (B, T, N, D)
    a_spatial: Tensor  # (B, F)
    selection: Optional[np.ndarray] = None  # (B, T, N) sparse-branch picks


def region_average_matrix(partition: RegionPartition, n_electrodes: int) -> np.ndarray:
    """(N, N) matrix whose row i averages the electrodes of i's region."""
    same = region_matrix(partition, n_electrodes).astype(np.float64)
    sizes = same.sum(axis=1, keepdims=True)
    return same / np.where(sizes > 0, sizes, 1.0)


def sparse_candidates(partition: RegionPartition, n_electrodes: int) -> np.ndarray:
    """
    Boolean (N, N) candidate pattern of the sparse branch.

    Same-region electrodes other than self; an electrode alone in its region
    (or in none) falls back to itself.
    """
    allowed = region_matrix(partition, n_electrodes) & ~np.eye(n_electrodes, dtype=bool)
    lonely = ~allowed.any(axis=1)
    if lonely.any():
        logger.warning(f"{int(lonely.sum())} electrodes have no same-region partner; sparse branch selects self")
        allowed[lonely, lonely] = True
    return allowed


def project_qkv(x: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Per-electrode band-space projections Q = X Wq^T, K = X Wk^T, V = X Wv^T."""
    return linear(x, w_q), linear(x, w_k), linear(x, w_v)


def rcb(v: Tensor, partition: RegionPartition = DEFAULT_PARTITION) -> Tensor:
    """Regional-continuous branch: every electrode receives its region's mean value row."""
    average = region_average_matrix(partition, v.shape[-2]).astype(v.dtype)
    return matmul(Tensor(average), v)


def rsb(q: Tensor, k: Tensor, v: Tensor, partition: RegionPartition = DEFAULT_PARTITION,
        d_k: Optional[int] = None) -> Tuple[Tensor, np.ndarray]:
    """
    Regional-sparse branch.

    For electrode i the partner j maximises Q_i . K_j / sqrt(d_k) over the
    other electrodes of i's region, ties going to the smallest index, and
    row i of the output is an exact copy of V_j.

    Args:
        q, k, v: (..., N, D) projections
        partition: Region partition of the N electrodes
        d_k: Score scale, defaults to D

    Returns:
        Tuple of (selected value rows, (..., N) selected indices)
    """
    n_electrodes = q.shape[-2]
    scale = 1.0 / math.sqrt(d_k or q.shape[-1])
    scores = (q.data @ np.swapaxes(k.data, -1, -2)) * scale
    allowed = sparse_candidates(partition, n_electrodes)
    # np.argmax returns the first maximum, i.e. the smallest index on ties
    selection = np.argmax(np.where(allowed, scores, -np.inf), axis=-1)

    lead = selection.shape[:-1]
    grids = np.meshgrid(*[np.arange(size) for size in lead], indexing="ij") if lead else []
    index = tuple(g[..., None] for g in grids) + (selection,)
    return getitem(v, index), selection


def fuse_and_project(f_rcb: Tensor, f_rsb: Tensor, alpha: Tensor, x: Tensor, w_o: Tensor, b_o: Tensor,
                     ln_gain: Tensor, ln_bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Gate, pool, project and add back.

    fused = sigmoid(alpha) * F_rcb + (1 - sigmoid(alpha)) * F_rsb, pooled over
    the electrode axis, projected with (W_o, b_o) and broadcast over
    electrodes into the residual ``LayerNorm(x + F_out)``.
    """
    gate = sigmoid(alpha)
    fused = gate * f_rcb + (1.0 - gate) * f_rsb
    pooled = fused.mean(axis=-2)
    f_out = linear(pooled, w_o, b_o)
    lead = f_out.shape[:-1]
    return layer_norm(x + reshape(f_out, lead + (1, f_out.shape[-1])), ln_gain, ln_bias, eps)


def spatial_attention(enhanced: Tensor, w_a: Tensor, b_a: Tensor) -> Tensor:
    """sigmoid(flat(X_t) W_a^T + b_a) averaged over time; (B, T, N, D) -> (B, N*D)."""
    batch, window = enhanced.shape[:2]
    flat = reshape(enhanced, (batch, window, -1))
    return sigmoid(linear(flat, w_a, b_a)).mean(axis=1)


class RegionEncoder:
    """Parameters and forward pass of the region-aware spatial encoder."""

    def __init__(self, store: ParamStore, rng: np.random.Generator, n_electrodes: int, n_bands: int,
                 partition: RegionPartition = DEFAULT_PARTITION, eps: float = 1e-5,
                 prefix: str = "rgrm/", enabled: bool = True):
        self.n_electrodes = n_electrodes
        self.n_bands = n_bands
        self.partition = partition
        self.eps = eps
        self.enabled = enabled
        features = n_electrodes * n_bands

        self.w_a = store.add(prefix + "W_a", glorot(rng, features, features))
        self.b_a = store.add(prefix + "b_a", zeros(features))
        if not enabled:
            logger.info("Region encoder disabled: spatial head reads the calibrated input")
            return
        self.w_q = store.add(prefix + "W_q", glorot(rng, n_bands, n_bands))
        self.w_k = store.add(prefix + "W_k", glorot(rng, n_bands, n_bands))
        self.w_v = store.add(prefix + "W_v", identity(n_bands) + glorot(rng, n_bands, n_bands) * 0.1)
        self.alpha = store.add(prefix + "alpha", zeros(1))
        self.w_o = store.add(prefix + "W_o", glorot(rng, n_bands, n_bands))
        self.b_o = store.add(prefix + "b_o", zeros(n_bands))
        self.ln_gain = store.add(prefix + "ln_gain", ones(n_bands))
        self.ln_bias = store.add(prefix + "ln_bias", zeros(n_bands))

    def forward(self, x: Tensor) -> SpatialOutput:
        """Encode (B, T, F) features; F must equal N * D."""
        batch, window, features = x.shape
        if features != self.n_electrodes * self.n_bands:
            raise ValueError(f"Feature width {features} != {self.n_electrodes} electrodes x {self.n_bands} bands")
        grid = reshape(x, (batch, window, self.n_electrodes, self.n_bands))
        if not self.enabled:
            return SpatialOutput(grid, spatial_attention(grid, self.w_a, self.b_a))

        q, k, v = project_qkv(grid, self.w_q, self.w_k, self.w_v)
        f_rcb = rcb(v, self.partition)
        f_rsb, selection = rsb(q, k, v, self.partition, self.n_bands)
        enhanced = fuse_and_project(f_rcb, f_rsb, self.alpha, grid, self.w_o, self.b_o,
                                    self.ln_gain, self.ln_bias, self.eps)
        return SpatialOutput(enhanced, spatial_attention(enhanced, self.w_a, self.b_a), selection)
