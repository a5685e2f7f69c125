"""Group summarization: multi-scale pooling plus cross-image attention.

Each image of a group is condensed to 46 pooled feature vectors (one
global, nine from a 3x3 grid, thirty-six from a 6x6 grid). Attention over
the 46N pooled vectors, with same-image pairs suppressed, mixes cues
across images; the attended result is added back as a residual to give
the consensus feature Z, and the attention matrix averaged over queries
yields one scalar weight per pooled vector (the common weight W).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGroupWarning, DimensionError, UsageError
from .nn import Linear, Module
from .ops import adaptive_max_pool2d, softmax
from .tensor import Tensor, add, concat, index_select, matmul, mul, reshape, tmean, transpose

POOL_SCALES = (1, 3, 6)
POOLED_COUNT = sum(s * s for s in POOL_SCALES)  # 46
SUPPRESSION = -1e4


@dataclass
class PooledFeature:
    """Per-image pooled descriptors, shape (N, 46, C)."""

    f: Tensor

    def __post_init__(self):
        if self.f.ndim != 3 or self.f.shape[1] != POOLED_COUNT:
            raise DimensionError(f"pooled feature must be (N, {POOLED_COUNT}, C), got {self.f.shape}")


@dataclass
class ConsensusFeature:
    """Attention-refined group feature with its attention artifacts.

    z: (N, 46, C) residual-refined feature; affinity: (46N, 46N) raw scores
    after suppression; attention: row-normalized affinity; common_weight:
    (N, 46) query-averaged attention, summing to 1 over all entries.
    """

    z: Tensor
    affinity: Tensor
    attention: Tensor
    common_weight: Tensor


class AttentionProjection(Module):
    """Query/key/value maps to C/2 channels plus the output map back to C."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        if channels % 2:
            raise DimensionError(f"attention projection needs an even channel count, got {channels}")
        half = channels // 2
        self.query = Linear(channels, half, rng, bias=False)
        self.key = Linear(channels, half, rng, bias=False)
        self.value = Linear(channels, half, rng, bias=False)
        self.out = Linear(half, channels, rng, bias=True)


def multi_scale_pool(x: Tensor) -> PooledFeature:
    """Pool (N,C,H,W) to the 46 descriptors per image; needs H, W >= 6."""
    if x.ndim != 4:
        raise DimensionError(f"multi_scale_pool expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    if h < max(POOL_SCALES) or w < max(POOL_SCALES):
        raise DimensionError(
            f"multi_scale_pool needs spatial size >= {max(POOL_SCALES)}, got {h}x{w}")
    parts = []
    for s in POOL_SCALES:
        pooled = adaptive_max_pool2d(x, s, s)
        parts.append(reshape(pooled, n, c, s * s))
    f = concat(parts, axis=2)           # (N, C, 46)
    return PooledFeature(transpose(f, 0, 2, 1))


def _same_image_mask(n: int, dtype) -> np.ndarray:
    """(46N, 46N) indicator of query/key pairs drawn from the same image."""
    image_of = np.repeat(np.arange(n), POOLED_COUNT)
    return (image_of[:, None] == image_of[None, :]).astype(dtype)


def compute_affinity(f: PooledFeature, proj: AttentionProjection,
                     suppression: float = SUPPRESSION) -> tuple[Tensor, Tensor]:
    """Pairwise dot-product scores and their key-axis softmax.

    Scores between descriptors of the same image are overwritten with
    `suppression` so attention looks only across images. A single-image
    group would suppress every key, so suppression is skipped there with a
    DegenerateGroupWarning.
    """
    n, _, _ = f.f.shape
    flat = reshape(f.f, n * POOLED_COUNT, f.f.shape[2])
    q = proj.query(flat)
    k = proj.key(flat)
    affinity = matmul(q, transpose(k))
    if n == 1:
        warnings.warn("single-image group: intra-image suppression skipped",
                      DegenerateGroupWarning)
    else:
        mask = _same_image_mask(n, affinity.dtype)
        keep = Tensor(1.0 - mask)
        filler = Tensor(suppression * mask)
        affinity = add(mul(affinity, keep), filler)
    attention = softmax(affinity, axis=1)
    return affinity, attention


def aggregate_consensus(f: PooledFeature, proj: AttentionProjection,
                        suppression: float = SUPPRESSION) -> ConsensusFeature:
    """Residual attention refinement plus the query-averaged common weight."""
    n, _, c = f.f.shape
    affinity, attention = compute_affinity(f, proj, suppression)
    flat = reshape(f.f, n * POOLED_COUNT, c)
    attended = matmul(attention, proj.value(flat))      # (46N, C/2)
    residual = reshape(proj.out(attended), n, POOLED_COUNT, c)
    z = add(f.f, residual)
    common = reshape(tmean(attention, axis=0), n, POOLED_COUNT)
    return ConsensusFeature(z=z, affinity=affinity, attention=attention, common_weight=common)


def permute_group(x: Tensor, perm) -> Tensor:
    """Reorder the leading (image) axis by a permutation of 0..N-1."""
    order = list(perm)
    if sorted(order) != list(range(x.shape[0])):
        raise UsageError(f"{perm!r} is not a permutation of 0..{x.shape[0] - 1}")
    return index_select(x, order, axis=0)
