"""Target assignment, center-ness targets, box geometry and inference decoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .config import Annotation, DetectorConfig, Detection
from .model import HeadOutputs, level_locations

BACKGROUND = -1


@dataclass
class AssignedTargets:
    """Per-location targets for one image, concatenated over levels."""

    labels: np.ndarray  # (L,) int, BACKGROUND or class id
    ltrb: np.ndarray  # (L, 4) float64; zero rows for background
    centerness: np.ndarray  # (L,) float64; zero for background
    level: np.ndarray  # (L,) int level index of each location
    gt_index: np.ndarray  # (L,) int matched box index, -1 for background

    @property
    def positive(self) -> np.ndarray:
        return self.labels != BACKGROUND

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def centerness_target(ltrb: np.ndarray) -> np.ndarray:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); 0 where a side pair is degenerate."""
    ltrb = np.asarray(ltrb, dtype=np.float64)
    l, t, r, b = ltrb[..., 0], ltrb[..., 1], ltrb[..., 2], ltrb[..., 3]
    lr_max, tb_max = np.maximum(l, r), np.maximum(t, b)
    ok = (lr_max > 0) & (tb_max > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(ok, (np.minimum(l, r) / lr_max) * (np.minimum(t, b) / tb_max), 0.0)
    return np.sqrt(np.clip(ratio, 0.0, None))


def assign_targets(
    locations: Sequence[np.ndarray], gts: Sequence[Annotation], cfg: DetectorConfig
) -> AssignedTargets:
    """FCOS assignment.

    A location is positive for a box when it lies strictly inside the box and
    max(l, t, r, b) falls in its level's half-open range. Among several such
    boxes the smallest-area one wins; equal areas resolve to the lower index.
    """
    counts = [len(loc) for loc in locations]
    total = sum(counts)
    level = np.concatenate([np.full(c, i, dtype=np.int64) for i, c in enumerate(counts)]) if total else np.zeros(0, int)
    labels = np.full(total, BACKGROUND, dtype=np.int64)
    ltrb = np.zeros((total, 4))
    gt_index = np.full(total, -1, dtype=np.int64)
    if not gts or total == 0:
        return AssignedTargets(labels, ltrb, np.zeros(total), level, gt_index)

    boxes = np.array([g.box for g in gts], dtype=np.float64)
    classes = np.array([g.cls for g in gts], dtype=np.int64)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    pts = np.concatenate(locations, axis=0)
    lo = np.array([cfg.ranges[i][0] for i in level])
    hi = np.array([cfg.ranges[i][1] for i in level])

    x, y = pts[:, 0:1], pts[:, 1:2]
    dist = np.stack([x - boxes[:, 0], y - boxes[:, 1], boxes[:, 2] - x, boxes[:, 3] - y], axis=2)  # (L, G, 4)
    inside = dist.min(axis=2) > 0
    reach = dist.max(axis=2)
    in_range = (reach >= lo[:, None]) & (reach < hi[:, None])
    candidate = inside & in_range
    masked_area = np.where(candidate, areas[None, :], np.inf)
    best = np.argmin(masked_area, axis=1)  # first minimum -> lowest index on ties
    pos = candidate.any(axis=1)

    rows = np.nonzero(pos)[0]
    labels[rows] = classes[best[rows]]
    gt_index[rows] = best[rows]
    ltrb[rows] = dist[rows, best[rows]]
    ctr = np.zeros(total)
    ctr[rows] = centerness_target(ltrb[rows])
    return AssignedTargets(labels, ltrb, ctr, level, gt_index)


# ---------------------------------------------------------------------------
# box geometry (numpy)
# ---------------------------------------------------------------------------

def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix between (A, 4) and (B, 4) boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order (stable on ties)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    iou = box_iou(boxes, boxes)
    for rank, i in enumerate(order):
        if suppressed[rank]:
            continue
        keep.append(i)
        later = order[rank + 1 :]
        suppressed[rank + 1 :] |= iou[i, later] > iou_threshold
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def decode_ltrb(locations: np.ndarray, ltrb: np.ndarray) -> np.ndarray:
    x, y = locations[:, 0], locations[:, 1]
    return np.stack([x - ltrb[:, 0], y - ltrb[:, 1], x + ltrb[:, 2], y + ltrb[:, 3]], axis=1)


def decode_image(
    cls_logits: np.ndarray,
    ltrb: np.ndarray,
    ctr_logits: np.ndarray,
    locations: np.ndarray,
    image_size: Tuple[int, int],
    cfg: DetectorConfig,
) -> List[Detection]:
    """Detections for one image from flattened outputs: cls (L, C), ltrb (L, 4), ctr (L,)."""
    h, w = image_size
    scores = np.sqrt(_sigmoid(cls_logits) * _sigmoid(ctr_logits)[:, None])
    loc_idx, cls_idx = np.nonzero(scores > cfg.score_threshold)
    if len(loc_idx) == 0:
        return []
    cand = scores[loc_idx, cls_idx]
    if len(cand) > cfg.pre_nms_top_k:
        top = np.argsort(-cand, kind="stable")[: cfg.pre_nms_top_k]
        loc_idx, cls_idx, cand = loc_idx[top], cls_idx[top], cand[top]
    boxes = decode_ltrb(locations[loc_idx], np.asarray(ltrb, dtype=np.float64)[loc_idx])
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, cls_idx, cand = boxes[valid], cls_idx[valid], cand[valid]

    kept = []
    for c in np.unique(cls_idx):
        sel = np.nonzero(cls_idx == c)[0]
        kept.extend(sel[nms(boxes[sel], cand[sel], cfg.nms_iou)])
    kept = np.array(kept, dtype=np.int64)
    if len(kept) == 0:
        return []
    kept = kept[np.argsort(-cand[kept], kind="stable")][: cfg.max_detections]
    return [Detection(int(cls_idx[i]), tuple(boxes[i]), float(min(cand[i], 1.0))) for i in kept]


def decode_detections(outputs: HeadOutputs, cfg: DetectorConfig) -> List[List[Detection]]:
    """Per-image detection lists from head outputs (eval mode)."""
    cls, ltrb, ctr = outputs.flatten()
    locations = np.concatenate(level_locations(outputs.sizes, cfg.strides), axis=0)
    return [
        decode_image(cls.data[i], ltrb.data[i], ctr.data[i], locations, outputs.image_size, cfg)
        for i in range(cls.shape[0])
    ]
