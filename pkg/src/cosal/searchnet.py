"""The co-saliency network: encoder, dynamic-search decoders, training.

Layout: a six-stage convolutional encoder halves resolution after each of
the first five stages; six decoders walk back up, deepest first. Decoder i
consumes encoder stage 7-i. The deepest `cadc_levels` decoders refine
their encoder feature through consensus-driven dynamic convolution
(summarize the group, generate kernels, search); the remaining decoders
use a cheap spatial-attention gate instead. Every decoder emits a
sigmoid side output at full input resolution, all of which are supervised;
the last (shallowest) side output is the prediction.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .consensus import AttentionProjection, aggregate_consensus, multi_scale_pool
from .errors import DataError, DimensionError, UsageError
from .kernelgen import DynamicKernelSet, KernelGenParams, generate_kernel_set
from .nn import SGD, BatchNorm, Conv2d, ConvBNReLU, Module, ModuleList
from .ops import (adaptive_max_pool2d, bilinear_upsample, binary_cross_entropy, conv2d,
                  depthwise_conv2d, sigmoid)
from .rng import Xorshift128Plus, derive_seed
from .tensor import Tensor, add, backward, concat, mul, narrow, no_grad, reshape

KERNEL_KINDS = ("vanilla", "large", "both")
KERNEL_PARTS = ("adaptive", "common", "both")
STAGES = 6
MAX_CADC_LEVELS = 4
MIN_POOLED_SIZE = 6  # multi-scale pooling needs at least a 6x6 map


@dataclass
class NetworkConfig:
    """Architecture and determinism knobs for one model instance."""

    widths: tuple[int, ...] = (16, 32, 64, 64, 96, 128)
    kernel_kind: str = "large"
    kernel_parts: str = "both"
    cadc_levels: int = 4
    resolution: int = 256
    c1: tuple[int, ...] | None = None  # per decoder (6 entries); None = encoder width
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != STAGES or any(w < 1 for w in self.widths):
            raise UsageError(f"widths must be {STAGES} positive integers, got {self.widths}")
        if self.kernel_kind not in KERNEL_KINDS:
            raise UsageError(f"kernel kind must be one of {KERNEL_KINDS}, got {self.kernel_kind!r}")
        if self.kernel_parts not in KERNEL_PARTS:
            raise UsageError(f"kernel parts must be one of {KERNEL_PARTS}, got {self.kernel_parts!r}")
        if not (0 <= self.cadc_levels <= MAX_CADC_LEVELS):
            raise UsageError(f"cadc_levels must be 0..{MAX_CADC_LEVELS}, got {self.cadc_levels}")
        if self.resolution % 32 != 0 or self.resolution < 32:
            raise UsageError(f"resolution must be a positive multiple of 32, got {self.resolution}")
        if self.cadc_levels > 0 and self.resolution // 32 < MIN_POOLED_SIZE:
            raise UsageError(
                f"resolution {self.resolution} leaves the deepest stage below "
                f"{MIN_POOLED_SIZE}x{MIN_POOLED_SIZE}; need >= {32 * MIN_POOLED_SIZE} "
                "when any decoder does dynamic search")
        if self.c1 is not None:
            self.c1 = tuple(int(v) for v in self.c1)
            if len(self.c1) != STAGES or any(v < 1 for v in self.c1):
                raise UsageError(f"c1 must be {STAGES} positive integers, got {self.c1}")

    def c1_for(self, decoder_index: int) -> int:
        """Output width of dynamic search at decoder `decoder_index` (1-based)."""
        if self.c1 is not None:
            return self.c1[decoder_index - 1]
        return self.widths[STAGES - decoder_index]

    def kinds(self) -> tuple[str, ...]:
        return ("vanilla", "large") if self.kernel_kind == "both" else (self.kernel_kind,)


@dataclass
class ImageGroup:
    """One group: images (N,3,H,W) in [0,1] plus optional binary masks."""

    name: str
    images: np.ndarray
    masks: np.ndarray | None = None
    stems: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise DimensionError(f"group images must be (N,3,H,W), got {self.images.shape}")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=np.float32)
            n, _, h, w = self.images.shape
            if self.masks.shape != (n, 1, h, w):
                raise DimensionError(
                    f"group masks must be ({n},1,{h},{w}), got {self.masks.shape}")
        if not self.stems:
            self.stems = [f"{self.name}_{i:03d}" for i in range(self.images.shape[0])]


class Encoder(Module):
    """Six conv(3x3)+BN+ReLU stages with 2x max-pool between them."""

    def __init__(self, widths: tuple[int, ...], rng: np.random.Generator):
        super().__init__()
        stages = []
        cin = 3
        for w in widths:
            stages.append(ConvBNReLU(cin, w, 3, rng, padding=1))
            cin = w
        self.stages = ModuleList(stages)

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        h = x
        for i, stage in enumerate(self.stages):
            h = stage(h)
            feats.append(h)
            if i < len(self.stages) - 1:
                from .ops import adaptive_max_pool2d
                h = adaptive_max_pool2d(h, h.shape[2] // 2, h.shape[3] // 2)
        return feats


def _match_resolution(prev: Tensor, h: int, w: int) -> Tensor:
    """Bring the previous decoder output to (h, w); only 1x or 2x is legal."""
    ph, pw = prev.shape[2], prev.shape[3]
    if (ph, pw) == (h, w):
        return prev
    if (ph * 2, pw * 2) != (h, w):
        raise DimensionError(
            f"decoder input at {ph}x{pw} cannot reach {h}x{w} by 2x upsampling")
    return bilinear_upsample(prev, 2)


def dynamic_search(x: Tensor, kernels, fusion, parts: str = "both") -> Tensor:
    """Convolve x with each kernel set's adaptive and common kernels, fuse.

    `kernels` is one DynamicKernelSet or a list of them; responses are
    concatenated channel-wise in (set, adaptive-then-common) order and fed
    through the learned `fusion` block, which maps them to C1 channels.
    """
    kernel_sets = [kernels] if isinstance(kernels, DynamicKernelSet) else list(kernels)
    if not kernel_sets:
        raise UsageError("dynamic_search needs at least one kernel set")
    if parts not in KERNEL_PARTS:
        raise UsageError(f"parts must be one of {KERNEL_PARTS}, got {parts!r}")
    n, c = x.shape[0], x.shape[1]
    responses = []
    for ks in kernel_sets:
        if ks.adaptive_point.shape[2] != c:
            raise DimensionError(
                f"kernel set expects {ks.adaptive_point.shape[2]} channels, input has {c}")
        c1 = ks.c1
        if parts in ("adaptive", "both"):
            per_image = []
            for i in range(n):
                xi = narrow(x, 0, i, 1)
                if ks.kind == "large":
                    dk = reshape(narrow(ks.adaptive_depth, 0, i, 1), c, 3, 3)
                    xi = depthwise_conv2d(xi, dk, padding=1)
                pk = reshape(narrow(ks.adaptive_point, 0, i, 1), c1, c, 1, 1)
                per_image.append(conv2d(xi, pk))
            responses.append(concat(per_image, axis=0))
        if parts in ("common", "both"):
            xc = x
            if ks.kind == "large":
                xc = depthwise_conv2d(xc, ks.common_depth, padding=1)
            responses.append(conv2d(xc, ks.common_point))
    stacked = responses[0] if len(responses) == 1 else concat(responses, axis=1)
    return fusion(stacked)


def response_count(kind: str, parts: str) -> int:
    """Number of C1-channel responses dynamic_search concatenates."""
    per_set = 2 if parts == "both" else 1
    sets = 2 if kind == "both" else 1
    return per_set * sets


class CadcDecoder(Module):
    """Decoder that refines its encoder feature by dynamic-kernel search."""

    def __init__(self, enc_channels: int, prev_channels: int, c1: int,
                 kinds: tuple[str, ...], parts: str, rng: np.random.Generator):
        super().__init__()
        self.parts = parts
        self.projection = AttentionProjection(enc_channels, rng)
        self.kernel_params = ModuleList(
            [KernelGenParams(kind, enc_channels, c1, rng) for kind in kinds])
        n_resp = len(kinds) * (2 if parts == "both" else 1)
        self.fusion = ConvBNReLU(n_resp * c1, c1, 1, rng)
        self.refine1 = ConvBNReLU(c1 + prev_channels, enc_channels, 3, rng, padding=1)
        self.refine2 = ConvBNReLU(enc_channels, enc_channels, 3, rng, padding=1)

    def kernel_sets(self, x_enc: Tensor) -> list[DynamicKernelSet]:
        pooled = multi_scale_pool(x_enc)
        z = aggregate_consensus(pooled, self.projection)
        return [generate_kernel_set(z, p) for p in self.kernel_params]

    def __call__(self, x_enc: Tensor, prev: Tensor) -> Tensor:
        searched = dynamic_search(x_enc, self.kernel_sets(x_enc), self.fusion, self.parts)
        prev_up = _match_resolution(prev, x_enc.shape[2], x_enc.shape[3])
        h = concat([searched, prev_up], axis=1)
        return self.refine2(self.refine1(h))


class SpatialAttentionDecoder(Module):
    """Decoder that gates its encoder feature with a single attention map."""

    def __init__(self, enc_channels: int, prev_channels: int, rng: np.random.Generator):
        super().__init__()
        self.att = Conv2d(prev_channels, 1, 1, rng, bias=True)
        self.refine1 = ConvBNReLU(enc_channels + prev_channels, enc_channels, 3, rng, padding=1)
        self.refine2 = ConvBNReLU(enc_channels, enc_channels, 3, rng, padding=1)

    def __call__(self, x_enc: Tensor, prev: Tensor) -> Tensor:
        prev_up = _match_resolution(prev, x_enc.shape[2], x_enc.shape[3])
        gate = sigmoid(self.att(prev_up))
        h = concat([mul(x_enc, gate), prev_up], axis=1)
        return self.refine2(self.refine1(h))


class SideHead(Module):
    """1x1 conv + sigmoid + upsample to the input resolution."""

    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, 1, 1, rng, bias=True)

    def __call__(self, x: Tensor, factor: int) -> Tensor:
        return bilinear_upsample(sigmoid(self.conv(x)), factor)


class CoSalNet(Module):
    """Encoder plus six decoders with deep supervision heads."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg.widths, rng)
        decoders, heads = [], []
        for i in range(1, STAGES + 1):  # decoder index, deepest first
            stage = STAGES - i
            enc_ch = cfg.widths[stage]
            prev_ch = cfg.widths[stage + 1] if i > 1 else cfg.widths[-1]
            if i <= cfg.cadc_levels:
                decoders.append(CadcDecoder(enc_ch, prev_ch, cfg.c1_for(i),
                                            cfg.kinds(), cfg.kernel_parts, rng))
            else:
                decoders.append(SpatialAttentionDecoder(enc_ch, prev_ch, rng))
            heads.append(SideHead(enc_ch, rng))
        self.decoders = ModuleList(decoders)
        self.heads = ModuleList(heads)

    def forward_group(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Run one group; returns (final map, all six side outputs)."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected (N,3,R,R) input, got {images.shape}")
        if images.shape[0] < 1:
            raise UsageError("cannot run an empty group")
        r = self.cfg.resolution
        if images.shape[2] != r or images.shape[3] != r:
            raise DimensionError(
                f"input is {images.shape[2]}x{images.shape[3]}, configured resolution is {r}")
        feats = self.encoder(images)
        prev = feats[-1]
        sides = []
        for i, decoder in enumerate(self.decoders):
            out = decoder(feats[STAGES - 1 - i], prev)
            sides.append(self.heads[i](out, r // out.shape[2]))
            prev = out
        return sides[-1], sides

    def bn_populated(self) -> bool:
        return all(m.state.populated for m in self.modules() if isinstance(m, BatchNorm))


def deep_supervised_loss(side_outputs: list[Tensor], gt) -> Tensor:
    """Sum over side outputs of mean binary cross-entropy against gt."""
    if not side_outputs:
        raise UsageError("no side outputs to supervise")
    gt_data = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if ((gt_data < 0) | (gt_data > 1)).any():
        raise DataError("ground-truth values must lie in [0,1]")
    total = None
    for side in side_outputs:
        term = binary_cross_entropy(side, gt_data.astype(side.dtype))
        total = term if total is None else add(total, term)
    return total


def _mean_bce(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.clip(pred.astype(np.float64), 1e-7, 1.0 - 1e-7)
    t = gt.astype(np.float64)
    return float(-(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean())


@dataclass
class TrainHyper:
    """SGD schedule: base lr divided by 10 at the given step fractions."""

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 200
    lr_drops: tuple[float, float] = (0.5, 0.75)
    max_group_size: int = 14
    flip_probability: float = 0.5
    early_stop_bce: float | None = None


@dataclass
class TrainResult:
    model: CoSalNet
    losses: list[float]
    smoothed: list[float]  # running minimum of losses
    final_bce: float       # final-decoder mean BCE at the last executed step
    steps_run: int


def train_toy(dataset: list[ImageGroup], cfg: NetworkConfig, hyper: TrainHyper,
              model: CoSalNet | None = None) -> TrainResult:
    """Overfit-scale trainer: one group per minibatch, deep supervision."""
    if not dataset:
        raise UsageError("cannot train on an empty dataset")
    for g in dataset:
        if g.masks is None:
            raise UsageError(f"group {g.name!r} has no ground-truth masks")
    if model is None:
        model = CoSalNet(cfg)
    model.train()
    opt = SGD(model.parameters(), hyper.lr, hyper.momentum, hyper.weight_decay)
    rng = Xorshift128Plus(derive_seed(cfg.seed, "train"))
    drop1 = int(hyper.steps * hyper.lr_drops[0])
    drop2 = int(hyper.steps * hyper.lr_drops[1])
    losses: list[float] = []
    smoothed: list[float] = []
    final_bce = math.inf
    steps_run = 0
    for step in range(hyper.steps):
        if step >= drop2:
            opt.lr = hyper.lr * 0.01
        elif step >= drop1:
            opt.lr = hyper.lr * 0.1
        else:
            opt.lr = hyper.lr
        group = dataset[step % len(dataset)]
        images, masks = group.images, group.masks
        if images.shape[0] > hyper.max_group_size:
            keep = _sample_without_replacement(rng, images.shape[0], hyper.max_group_size)
            images, masks = images[keep], masks[keep]
        images = images.copy()
        masks = masks.copy()
        for i in range(images.shape[0]):
            if rng.random() < hyper.flip_probability:
                images[i] = images[i, :, :, ::-1]
                masks[i] = masks[i, :, :, ::-1]
        _, sides = model.forward_group(Tensor(images))
        loss = deep_supervised_loss(sides, masks)
        opt.zero_grad()
        backward(loss)
        opt.step()
        value = loss.item()
        losses.append(value)
        smoothed.append(value if not smoothed else min(smoothed[-1], value))
        final_bce = _mean_bce(sides[-1].data, masks)
        steps_run = step + 1
        if hyper.early_stop_bce is not None and final_bce < hyper.early_stop_bce:
            break
    return TrainResult(model, losses, smoothed, final_bce, steps_run)


def _sample_without_replacement(rng: Xorshift128Plus, n: int, k: int) -> list[int]:
    pool = list(range(n))
    picked = []
    for _ in range(k):
        picked.append(pool.pop(rng.randrange(len(pool))))
    return sorted(picked)


def infer_group(model: CoSalNet, images: np.ndarray) -> np.ndarray:
    """Predict maps for one group; returns (N,1,R,R) float32 in [0,1].

    A model whose norm layers never saw data cannot run in eval mode, so a
    fresh (untrained) model falls back to batch statistics with a warning.
    """
    was_training = model.training
    if model.bn_populated():
        model.eval()
    else:
        warnings.warn("normalization statistics not populated; using batch statistics")
        model.train()
    try:
        with no_grad():
            final, _ = model.forward_group(Tensor(np.asarray(images, dtype=np.float32)))
    finally:
        model.train(was_training)
    return final.data.copy()
