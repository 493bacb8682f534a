"""Compact FCOS: residual backbone, feature pyramid and shared per-level heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from ..autodiff import ShapeError, Tensor, ops
from ..nn import Conv2d, GroupNorm, Module, ModuleList, Parameter
from ..nn.blocks import BRANCH_GAIN
from ..nn.module import LINEAR_GAIN
from .config import DetectorConfig

# bound on the scaled regression logit so exp() stays finite and positive in f32
LTRB_LOGIT_BOUND = 10.0


class BasicBlock(Module):
    """Normalization-free residual block: relu(x + conv(relu(conv(x))))."""

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.conv1 = Conv2d(rng, channels, channels, 3)
        self.conv2 = Conv2d(rng, channels, channels, 3, gain=BRANCH_GAIN)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x + self.conv2(ops.relu(self.conv1(x))))


class Backbone(Module):
    """Stride-4 stem followed by three residual stages producing C3, C4, C5."""

    divisor = 32

    def __init__(self, rng: np.random.Generator, cfg: DetectorConfig):
        super().__init__()
        self.stem1 = Conv2d(rng, 3, cfg.stem_width, 3, stride=2, pad=1)
        self.stem2 = Conv2d(rng, cfg.stem_width, cfg.stem_width, 3, stride=2, pad=1)
        self.downs = ModuleList()
        self.stages = ModuleList()
        cin = cfg.stem_width
        for width in cfg.backbone_widths:
            self.downs.append(Conv2d(rng, cin, width, 3, stride=2, pad=1))
            self.stages.append(ModuleList(BasicBlock(rng, width) for _ in range(cfg.blocks_per_stage)))
            cin = width

    def forward(self, image: Tensor) -> List[Tensor]:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"backbone input must be (N, 3, H, W), got {image.shape}")
        h, w = image.shape[2:]
        if h % self.divisor or w % self.divisor:
            raise ShapeError(f"backbone input {h}x{w} must be divisible by {self.divisor} in both axes")
        x = ops.relu(self.stem2(ops.relu(self.stem1(image))))
        feats = []
        for down, blocks in zip(self.downs, self.stages):
            x = ops.relu(down(x))
            for block in blocks:
                x = block(x)
            feats.append(x)
        return feats


class FPN(Module):
    def __init__(self, rng: np.random.Generator, in_channels: Sequence[int], channels: int):
        super().__init__()
        self.laterals = ModuleList(Conv2d(rng, c, channels, 1, gain=LINEAR_GAIN) for c in in_channels)
        self.smooth = ModuleList(Conv2d(rng, channels, channels, 3, gain=LINEAR_GAIN) for _ in in_channels)
        self.p6 = Conv2d(rng, channels, channels, 3, stride=2, pad=1, gain=LINEAR_GAIN)
        self.p7 = Conv2d(rng, channels, channels, 3, stride=2, pad=1, gain=LINEAR_GAIN)

    def forward(self, feats: Sequence[Tensor]) -> List[Tensor]:
        lat = [conv(f) for conv, f in zip(self.laterals, feats)]
        merged = [None] * len(lat)
        merged[-1] = lat[-1]
        for i in range(len(lat) - 2, -1, -1):
            merged[i] = lat[i] + ops.upsample_nearest(merged[i + 1], 2)
        outs = [conv(m) for conv, m in zip(self.smooth, merged)]
        p6 = self.p6(outs[-1])
        p7 = self.p7(ops.relu(p6))
        return outs + [p6, p7]


class Head(Module):
    """Classification and regression towers shared across pyramid levels."""

    def __init__(self, rng: np.random.Generator, cfg: DetectorConfig):
        super().__init__()
        f = cfg.fpn_channels
        self.centerness_on_reg = cfg.centerness_on_reg
        self.cls_tower = ModuleList(Conv2d(rng, f, f, 3) for _ in range(cfg.tower_convs))
        self.reg_tower = ModuleList(Conv2d(rng, f, f, 3) for _ in range(cfg.tower_convs))
        g = cfg.head_norm_groups
        if g:
            self.cls_norms = ModuleList(GroupNorm(g, f) for _ in range(cfg.tower_convs))
            self.reg_norms = ModuleList(GroupNorm(g, f) for _ in range(cfg.tower_convs))
        else:
            self.cls_norms = self.reg_norms = None
        self.cls_logits = Conv2d(rng, f, cfg.num_classes, 3, init_std=0.01)
        self.bbox_pred = Conv2d(rng, f, 4, 3, init_std=0.01)
        self.ctr_logits = Conv2d(rng, f, 1, 3, init_std=0.01)
        prior_bias = -math.log((1.0 - cfg.prior_prob) / cfg.prior_prob)
        self.cls_logits.bias.data[:] = prior_bias
        self.strides = cfg.strides
        for i in range(len(cfg.strides)):
            setattr(self, f"scale{i}", Parameter(np.ones(1, dtype=self.cls_logits.weight.dtype)))

    @staticmethod
    def _tower(x: Tensor, convs, norms) -> Tensor:
        for i, conv in enumerate(convs):
            x = conv(x)
            if norms is not None:
                x = norms[i](x)
            x = ops.relu(x)
        return x

    def forward(self, p: Tensor, level: int) -> Tuple[Tensor, Tensor, Tensor]:
        c = self._tower(p, self.cls_tower, self.cls_norms)
        r = self._tower(p, self.reg_tower, self.reg_norms)
        cls = self.cls_logits(c)
        raw = ops.scalar_scale(self.bbox_pred(r), getattr(self, f"scale{level}"))
        raw = ops.clamp(raw, -LTRB_LOGIT_BOUND, LTRB_LOGIT_BOUND)
        ltrb = ops.exp(raw) * float(self.strides[level])
        ctr = self.ctr_logits(r if self.centerness_on_reg else c)
        return cls, ltrb, ctr


@dataclass
class HeadOutputs:
    """Per-level raw head outputs plus their flattened (N, L, .) views."""

    levels: List[Tuple[Tensor, Tensor, Tensor]]
    sizes: List[Tuple[int, int]]
    image_size: Tuple[int, int]  # (H, W)

    def flatten(self) -> Tuple[Tensor, Tensor, Tensor]:
        """Concatenate levels into cls (N, L, C), ltrb (N, L, 4) and centerness logits (N, L)."""
        parts = ([], [], [])
        for outs in self.levels:
            for bucket, t in zip(parts, outs):
                n, ch, h, w = t.shape
                bucket.append(ops.reshape(ops.transpose(t, (0, 2, 3, 1)), (n, h * w, ch)))
        cls, ltrb, ctr = (ops.concat(b, axis=1) if len(b) > 1 else b[0] for b in parts)
        n, total, _ = ctr.shape
        return cls, ltrb, ops.reshape(ctr, (n, total))


class FCOS(Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(rng, cfg)
        self.fpn = FPN(rng, cfg.backbone_widths, cfg.fpn_channels)
        self.head = Head(rng, cfg)

    def forward(self, image: Tensor) -> HeadOutputs:
        return self.detect_from(self.backbone(image), image.shape[2:])

    def detect_from(self, feats: Sequence[Tensor], image_size) -> HeadOutputs:
        pyramid = self.fpn(feats)
        levels = [self.head(p, i) for i, p in enumerate(pyramid)]
        sizes = [tuple(p.shape[2:]) for p in pyramid]
        return HeadOutputs(levels, sizes, tuple(image_size))


def level_locations(sizes: Sequence[Tuple[int, int]], strides: Sequence[int]) -> List[np.ndarray]:
    """Image-plane (x, y) centres of every feature cell, row-major per level."""
    out = []
    for (h, w), s in zip(sizes, strides):
        ys, xs = np.meshgrid(np.arange(h) * s + s // 2, np.arange(w) * s + s // 2, indexing="ij")
        out.append(np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64))
    return out


def pyramid_sizes(h: int, w: int, strides: Sequence[int]) -> List[Tuple[int, int]]:
    """Feature sizes for an H x W input (stride-2 convs with padding 1 round up)."""
    sizes = []
    ch, cw = h // strides[0], w // strides[0]
    for i in range(len(strides)):
        if i > 2:
            ch, cw = (ch + 1) // 2, (cw + 1) // 2
        elif i > 0:
            ch, cw = ch // 2, cw // 2
        sizes.append((ch, cw))
    return sizes
