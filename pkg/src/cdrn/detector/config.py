"""Detector configuration and the box record types shared with metrics and data loading."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

DEFAULT_CLASSES = ("Car", "Pedestrian", "Cyclist")
INF = math.inf


@dataclass(frozen=True)
class DetectorConfig:
    class_names: Tuple[str, ...] = DEFAULT_CLASSES
    backbone_widths: Tuple[int, int, int] = (16, 32, 64)
    stem_width: int = 16
    blocks_per_stage: int = 2
    fpn_channels: int = 32
    tower_convs: int = 4
    # group normalization in the head towers; 0 disables it
    head_norm_groups: int = 8
    strides: Tuple[int, ...] = (8, 16, 32, 64, 128)
    # half-open [lo, hi) ranges on max(l, t, r, b), one per level
    ranges: Tuple[Tuple[float, float], ...] = ((0, 16), (16, 32), (32, 64), (64, 128), (128, INF))
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100
    pre_nms_top_k: int = 1000
    centerness_on_reg: bool = True
    prior_prob: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "ranges", tuple((float(lo), float(hi)) for lo, hi in self.ranges))
        if len(self.strides) != 5 or len(self.ranges) != 5:
            raise ValueError(f"detector needs 5 levels, got {len(self.strides)} strides and {len(self.ranges)} ranges")
        if len(self.backbone_widths) != 3:
            raise ValueError("backbone_widths must list the C3, C4, C5 widths")
        if self.ranges[0][0] != 0.0 or self.ranges[-1][1] != INF:
            raise ValueError("regression ranges must start at 0 and end at infinity")
        for (lo, hi), (nlo, _) in zip(self.ranges, self.ranges[1:]):
            if hi != nlo:
                raise ValueError(f"regression ranges must be contiguous, found gap/overlap at {hi} vs {nlo}")
        for lo, hi in self.ranges:
            if not lo < hi:
                raise ValueError(f"empty regression range [{lo}, {hi})")
        if self.head_norm_groups < 0 or (self.head_norm_groups and self.fpn_channels % self.head_norm_groups):
            raise ValueError(f"fpn_channels {self.fpn_channels} not divisible into {self.head_norm_groups} groups")
        if not self.class_names:
            raise ValueError("at least one class is required")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def class_index(self, name: str) -> int:
        return self.class_names.index(name)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ranges"] = [[lo, "inf" if hi == INF else hi] for lo, hi in self.ranges]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        if "ranges" in d:
            d["ranges"] = tuple((lo, INF if hi == "inf" else hi) for lo, hi in d["ranges"])
        return cls(**d)


@dataclass(frozen=True)
class Annotation:
    """A ground-truth box in pixel coordinates (x1, y1, x2, y2)."""

    cls: int
    box: Tuple[float, float, float, float]

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.box)
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        object.__setattr__(self, "box", (x1, y1, x2, y2))

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


@dataclass(frozen=True)
class Detection:
    cls: int
    box: Tuple[float, float, float, float]
    score: float = field(default=1.0)

    def __post_init__(self):
        x1, y1, x2, y2 = (float(v) for v in self.box)
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "box", (x1, y1, x2, y2))
        object.__setattr__(self, "score", float(self.score))
