"""Dynamic convolution kernels generated from the consensus feature.

Two families, each with a per-image (adaptive) and a per-group (common)
member:

* vanilla: plain 1x1 pointwise kernels.
* large: a 3x3 kernel factored into a depthwise 3x3 part plus a pointwise
  1x1 part, so a kernel costs C*9 + C1*C values instead of C1*C*9.

Every kernel is produced by a small FC stack applied to a contraction of
Z. The adaptive pointwise kernels contract Z with a learned softmax score
over the 46 pooled features; the common pointwise kernel contracts Z with
the attention-derived common weight W. The depthwise kernels run their
stacks directly over the 46-feature axis, per image-channel row for the
adaptive one and on a doubly score-contracted group summary for the
common one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .consensus import POOLED_COUNT, ConsensusFeature
from .errors import DimensionError, UsageError
from .nn import BatchNorm, Linear, Module, PReLU
from .ops import relu, softmax
from .tensor import Tensor, mul, reshape, transpose, tsum

DEPTH_KERNEL = 3  # spatial size of the factored large kernel


@dataclass
class DynamicKernelSet:
    """Kernels for one group at one decoder level.

    adaptive_point: (N, C1, C, 1, 1); common_point: (C1, C, 1, 1);
    adaptive_depth/common_depth: (N, C, 3, 3) / (C, 3, 3), large kind only.
    """

    kind: str
    adaptive_point: Tensor
    common_point: Tensor
    adaptive_depth: Tensor | None
    common_depth: Tensor | None
    c1: int


class _ScoreStack(Module):
    """FC -> BN -> ReLU -> FC -> softmax over axis 1; width-1024 hidden."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 hidden: int = 1024):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.bn = BatchNorm(hidden)
        self.fc2 = Linear(hidden, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return softmax(self.fc2(relu(self.bn(self.fc1(x)))), axis=1)


class _KernelStack(Module):
    """FC -> (BN) -> PReLU -> FC emitting flattened kernel values."""

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 rng: np.random.Generator, with_bn: bool):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.bn = BatchNorm(hidden) if with_bn else None
        self.act = PReLU(hidden)
        self.fc2 = Linear(hidden, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.fc1(x)
        if self.bn is not None:
            h = self.bn(h)
        return self.fc2(self.act(h))


class KernelGenParams(Module):
    """All learned stacks needed for one kernel kind at one channel width.

    The common pointwise stack carries no batch norm: it sees a single
    group-level feature vector per forward pass, so batch statistics would
    be degenerate.
    """

    def __init__(self, kind: str, channels: int, c1: int, rng: np.random.Generator):
        super().__init__()
        if kind not in ("vanilla", "large"):
            raise UsageError(f"kernel kind must be 'vanilla' or 'large', got {kind!r}")
        if channels < 1 or c1 < 1:
            raise UsageError(f"channel counts must be positive, got C={channels}, C1={c1}")
        self.kind = kind
        self.channels = channels
        self.c1 = c1
        flat = POOLED_COUNT * channels
        self.adaptive_scorer = _ScoreStack(flat, POOLED_COUNT, rng)
        self.adaptive_point_stack = _KernelStack(channels, channels, c1 * channels, rng, with_bn=True)
        self.common_point_stack = _KernelStack(channels, channels, c1 * channels, rng, with_bn=False)
        if kind == "large":
            k2 = DEPTH_KERNEL * DEPTH_KERNEL
            self.adaptive_depth_stack = _KernelStack(POOLED_COUNT, POOLED_COUNT, k2, rng, with_bn=True)
            self.channel_scorer = _ScoreStack(flat, channels, rng)
            self.feature_scorer = _ScoreStack(flat, POOLED_COUNT, rng)
            self.common_depth_stack = _KernelStack(POOLED_COUNT, POOLED_COUNT, k2, rng, with_bn=True)


def _check_inputs(z: ConsensusFeature, p: KernelGenParams, c1: int | None) -> int:
    n, j, c = z.z.shape
    if c != p.channels:
        raise DimensionError(f"consensus feature has {c} channels, params expect {p.channels}")
    if c1 is not None and c1 != p.c1:
        raise UsageError(f"requested c1={c1} but params were built for c1={p.c1}")
    return n


def adaptive_feature(z: ConsensusFeature, scores: Tensor) -> Tensor:
    """Contract Z with per-image feature scores: (N,46,C),(N,46) -> (N,C)."""
    n, j, c = z.z.shape
    if scores.shape != (n, j):
        raise DimensionError(f"scores shape {scores.shape} != ({n}, {j})")
    return tsum(mul(z.z, reshape(scores, n, j, 1)), axis=1)


def common_feature(z: ConsensusFeature) -> Tensor:
    """Contract Z with the common weight W over images and features: -> (C,)."""
    n, j, _ = z.z.shape
    return tsum(mul(z.z, reshape(z.common_weight, n, j, 1)), axis=(0, 1))


def sequential_group_scores(z: ConsensusFeature, channel_scores: Tensor,
                            feature_scores: Tensor) -> Tensor:
    """Contract Z with channel scores then feature scores: -> (N,).

    The order is fixed (channels first, then the 46 features) so every
    intermediate shape is deterministic.
    """
    n, j, c = z.z.shape
    per_feature = tsum(mul(z.z, reshape(channel_scores, n, 1, c)), axis=2)  # (N, 46)
    return tsum(mul(feature_scores, per_feature), axis=1)


def vanilla_adaptive(z: ConsensusFeature, p: KernelGenParams, c1: int | None = None) -> Tensor:
    """Per-image 1x1 kernels, shape (N, C1, C, 1, 1)."""
    n = _check_inputs(z, p, c1)
    flat = reshape(z.z, n, POOLED_COUNT * p.channels)
    scores = p.adaptive_scorer(flat)
    focused = adaptive_feature(z, scores)
    kernels = p.adaptive_point_stack(focused)
    return reshape(kernels, n, p.c1, p.channels, 1, 1)


def vanilla_common(z: ConsensusFeature, p: KernelGenParams, c1: int | None = None) -> Tensor:
    """One group-level 1x1 kernel, shape (C1, C, 1, 1)."""
    _check_inputs(z, p, c1)
    pooled = reshape(common_feature(z), 1, p.channels)
    kernels = p.common_point_stack(pooled)
    return reshape(kernels, p.c1, p.channels, 1, 1)


def large_adaptive(z: ConsensusFeature, p: KernelGenParams,
                   c1: int | None = None) -> tuple[Tensor, Tensor]:
    """Per-image factored 3x3 kernels: depthwise (N,C,3,3) + pointwise (N,C1,C,1,1)."""
    n = _check_inputs(z, p, c1)
    if p.kind != "large":
        raise UsageError("large_adaptive needs params of kind 'large'")
    rows = reshape(transpose(z.z, 0, 2, 1), n * p.channels, POOLED_COUNT)
    depth = reshape(p.adaptive_depth_stack(rows), n, p.channels, DEPTH_KERNEL, DEPTH_KERNEL)
    point = vanilla_adaptive(z, p, c1)
    return depth, point


def large_common(z: ConsensusFeature, p: KernelGenParams,
                 c1: int | None = None) -> tuple[Tensor, Tensor]:
    """Group-level factored 3x3 kernel: depthwise (C,3,3) + pointwise (C1,C,1,1)."""
    n = _check_inputs(z, p, c1)
    if p.kind != "large":
        raise UsageError("large_common needs params of kind 'large'")
    flat = reshape(z.z, n, POOLED_COUNT * p.channels)
    channel_scores = p.channel_scorer(flat)      # (N, C)
    feature_scores = p.feature_scorer(flat)      # (N, 46)
    group_scores = sequential_group_scores(z, channel_scores, feature_scores)  # (N,)
    image_weights = softmax(group_scores, axis=0)
    weighted = tsum(mul(z.z, reshape(image_weights, n, 1, 1)), axis=0)  # (46, C)
    summary = transpose(weighted, 1, 0)                                 # (C, 46)
    depth = reshape(p.common_depth_stack(summary), p.channels, DEPTH_KERNEL, DEPTH_KERNEL)
    point = vanilla_common(z, p, c1)
    return depth, point


def generate_kernel_set(z: ConsensusFeature, p: KernelGenParams) -> DynamicKernelSet:
    """Produce the full kernel set of one kind from a consensus feature."""
    if p.kind == "vanilla":
        return DynamicKernelSet(
            kind="vanilla",
            adaptive_point=vanilla_adaptive(z, p),
            common_point=vanilla_common(z, p),
            adaptive_depth=None,
            common_depth=None,
            c1=p.c1,
        )
    depth_a, point_a = large_adaptive(z, p)
    depth_c, point_c = large_common(z, p)
    return DynamicKernelSet(
        kind="large",
        adaptive_point=point_a,
        common_point=point_c,
        adaptive_depth=depth_a,
        common_depth=depth_c,
        c1=p.c1,
    )
