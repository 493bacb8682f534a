"""Restoration building blocks: HIN block, Split-Attention Resblock, SAM and CSFF."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..autodiff import ShapeError, Tensor, ops
from .module import LINEAR_GAIN, OUTPUT_GAIN, RELU_GAIN, Conv2d, Linear, Module, ModuleList, Parameter

# Init gain for the last conv of a residual branch; keeps the stacked residual
# sums of an unnormalized network near unit variance at initialization.
BRANCH_GAIN = 0.1 * RELU_GAIN


class HINBlock(Module):
    """Half Instance Normalization block (HINet wiring).

    conv3x3 -> instance-norm on the first half of the channels -> concat ->
    leaky ReLU -> conv3x3 -> leaky ReLU, plus a 1x1-conv identity path.
    """

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, slope: float = 0.2):
        super().__init__()
        if cout % 2:
            raise ShapeError(f"HIN block needs an even channel count, got {cout}")
        self.slope = slope
        self.conv1 = Conv2d(rng, cin, cout, 3)
        self.conv2 = Conv2d(rng, cout, cout, 3, gain=BRANCH_GAIN)
        self.identity = Conv2d(rng, cin, cout, 1, gain=LINEAR_GAIN)
        half = cout // 2
        self.norm_weight = Parameter(np.ones(half, dtype=self.conv1.weight.dtype))
        self.norm_bias = Parameter(np.zeros(half, dtype=self.conv1.weight.dtype))

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv1(x)
        normed, raw = ops.split(out, 2, axis=1)
        normed = ops.instance_norm(normed, self.norm_weight, self.norm_bias)
        out = ops.leaky_relu(ops.concat([normed, raw], axis=1), self.slope)
        out = ops.leaky_relu(self.conv2(out), self.slope)
        return out + self.identity(x)


@dataclass(frozen=True)
class SARConfig:
    channels: int
    cardinal: int = 2  # k
    radix: int = 2  # r, splits per cardinal group
    reduction: int = 4

    def __post_init__(self):
        if self.cardinal < 1 or self.radix < 1:
            raise ValueError(f"cardinal groups and splits must be >= 1, got k={self.cardinal}, r={self.radix}")
        if self.channels % (self.cardinal * self.radix):
            raise ValueError(
                f"channels {self.channels} not divisible by k*r = {self.cardinal * self.radix}"
            )

    @property
    def group_width(self) -> int:
        return self.channels // self.cardinal

    @property
    def hidden(self) -> int:
        return max(self.channels // (self.cardinal * self.reduction), 4)


class SARBlock(Module):
    """Split-Attention Resblock.

    A 3x3 conv expands C channels to r splits of C; each split is laid out as
    k cardinal groups of C/k channels. Per cardinal group the splits are
    summed, pooled, passed through a two-layer FC bottleneck and turned into
    per-split channel attention (softmax across splits, sigmoid when r=1).
    The attention-weighted sum of splits, re-concatenated over groups, is
    added to a 1x1 "Res Conv" of the block input.
    """

    def __init__(self, rng: np.random.Generator, cfg: SARConfig):
        super().__init__()
        self.cfg = cfg
        c, r = cfg.channels, cfg.radix
        self.split_conv = Conv2d(rng, c, c * r, 3, gain=BRANCH_GAIN)
        self.fc1 = ModuleList(Linear(rng, cfg.group_width, cfg.hidden) for _ in range(cfg.cardinal))
        self.fc2 = ModuleList(Linear(rng, cfg.hidden, cfg.group_width * r) for _ in range(cfg.cardinal))
        self.res_conv = Conv2d(rng, c, c, 1, gain=LINEAR_GAIN)

    def attention(self, splits: Sequence[Tensor]) -> List[Tensor]:
        """Per-cardinal-group attention weights, each of shape (N, r, C/k)."""
        cfg = self.cfg
        n = splits[0].shape[0]
        total = splits[0]
        for s in splits[1:]:
            total = total + s
        pooled = ops.reshape(ops.global_avg_pool(total), (n, cfg.channels))
        weights = []
        for g in range(cfg.cardinal):
            z = ops.slice_axis(pooled, g * cfg.group_width, (g + 1) * cfg.group_width, axis=1)
            z = ops.relu(self.fc1[g](z))
            logits = ops.reshape(self.fc2[g](z), (n, cfg.radix, cfg.group_width))
            if cfg.radix > 1:
                weights.append(ops.softmax(logits, axis=1))
            else:
                weights.append(ops.sigmoid(logits))
        return weights

    def forward(self, x: Tensor, gate_override: Optional[float] = None, return_attention: bool = False):
        cfg = self.cfg
        n, c, h, w = x.shape
        if c != cfg.channels:
            raise ShapeError(f"SAR block built for {cfg.channels} channels, got input {x.shape}")
        u = ops.relu(self.split_conv(x))
        splits = ops.split(u, cfg.radix, axis=1)
        weights = self.attention(splits)
        groups = []
        for g in range(cfg.cardinal):
            lo, hi = g * cfg.group_width, (g + 1) * cfg.group_width
            acc = None
            for k, split in enumerate(splits):
                part = ops.slice_axis(split, lo, hi, axis=1)
                if gate_override is not None:
                    term = part * gate_override
                else:
                    a = ops.reshape(ops.slice_axis(weights[g], k, k + 1, axis=1), (n, cfg.group_width, 1, 1))
                    term = ops.channel_scale(part, a)
                acc = term if acc is None else acc + term
            groups.append(acc)
        out = ops.concat(groups, axis=1) if cfg.cardinal > 1 else groups[0]
        out = out + self.res_conv(x)
        if return_attention:
            return out, [wt.data for wt in weights]
        return out


class ResBlock(Module):
    """Plain residual block with a 1x1 Res Conv path; the SAR-free ablation decoder."""

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.conv1 = Conv2d(rng, channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3, gain=BRANCH_GAIN)
        self.res_conv = Conv2d(rng, channels, channels, 1, gain=LINEAR_GAIN)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(ops.relu(self.conv1(x))) + self.res_conv(x)


class SAM(Module):
    """Supervised attention module between the two restoration stages."""

    def __init__(self, rng: np.random.Generator, channels: int, image_channels: int = 3):
        super().__init__()
        self.to_image = Conv2d(rng, channels, image_channels, 1, gain=OUTPUT_GAIN)
        self.to_mask = Conv2d(rng, image_channels, channels, 1, gain=LINEAR_GAIN)

    def forward(self, features: Tensor, degraded: Tensor) -> Tuple[Tensor, Tensor]:
        if features.shape[2:] != degraded.shape[2:] or features.shape[0] != degraded.shape[0]:
            raise ShapeError(
                f"SAM: features {features.shape} and degraded input {degraded.shape} disagree spatially"
            )
        restored = self.to_image(features) + degraded
        mask = ops.sigmoid(self.to_mask(restored))
        gated = features * mask + features
        return restored, gated


class CSFF(Module):
    """Cross-stage feature fusion: bias-free 1x1 projections of stage-1 encoder and decoder maps."""

    def __init__(self, rng: np.random.Generator, channels_per_level: Sequence[int]):
        super().__init__()
        self.enc = ModuleList(Conv2d(rng, c, c, 1, bias=False, gain=LINEAR_GAIN) for c in channels_per_level)
        self.dec = ModuleList(Conv2d(rng, c, c, 1, bias=False, gain=LINEAR_GAIN) for c in channels_per_level)

    def forward(self, enc1: Sequence[Tensor], dec1: Sequence[Tensor]) -> List[Tensor]:
        levels = len(self.enc)
        if len(enc1) != levels or len(dec1) != levels:
            raise ShapeError(
                f"CSFF expects {levels} levels, got {len(enc1)} encoder and {len(dec1)} decoder maps"
            )
        return [self.enc[i](e) + self.dec[i](d) for i, (e, d) in enumerate(zip(enc1, dec1))]
