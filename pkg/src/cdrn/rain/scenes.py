"""Procedural street-like scenes with labelled rectangles, for data without a KITTI download."""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from ..detector.config import Annotation
from ..detector.targets import box_iou

# (min height, max height, min aspect w/h, max aspect w/h) per class id
_SHAPES = {
    0: (14, 40, 1.4, 2.4),  # Car: wide
    1: (18, 44, 0.3, 0.45),  # Pedestrian: tall and narrow
    2: (16, 38, 0.6, 0.9),  # Cyclist: roughly square
}


def _background(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    horizon = rng.uniform(0.35, 0.55)
    sky = np.array(rng.uniform([0.45, 0.55, 0.65], [0.65, 0.75, 0.9]))
    road = np.array(rng.uniform([0.2, 0.2, 0.2], [0.35, 0.35, 0.35]))
    t = np.clip((yy - horizon) * 8.0, 0.0, 1.0)[..., None]
    img = sky * (1 - t) + road * t
    texture = np.zeros((h, w))
    for _ in range(4):
        fx, fy = rng.uniform(1, 6, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    img = img + 0.03 * texture[..., None]
    return img


def _draw_object(img: np.ndarray, cls: int, box: Tuple[int, int, int, int], rng: np.random.Generator) -> None:
    x1, y1, x2, y2 = box
    color = rng.uniform(0.1, 0.95, size=3)
    img[y1:y2, x1:x2] = color
    img[y1:y2, x1:x1 + 1] *= 0.5
    img[y1:y2, x2 - 1:x2] *= 0.5
    img[y1:y1 + 1, x1:x2] *= 0.5
    img[y2 - 1:y2, x1:x2] *= 0.5
    bw, bh = x2 - x1, y2 - y1
    if cls == 0:  # windows band and dark wheels
        img[y1 + bh // 5 : y1 + bh // 2, x1 + bw // 6 : x2 - bw // 6] = 0.85
        wr = max(2, bh // 4)
        for cx in (x1 + bw // 4, x2 - bw // 4):
            img[y2 - wr : y2, cx - wr // 2 : cx + wr // 2 + 1] = 0.05
    elif cls == 1:  # head block
        hh = max(2, bh // 5)
        img[y1 : y1 + hh, x1 + bw // 4 : x2 - bw // 4] = 0.9
    else:  # diagonal stripes
        yy, xx = np.mgrid[y1:y2, x1:x2]
        stripes = ((xx + yy) // 3) % 2 == 0
        region = img[y1:y2, x1:x2]
        region[stripes] = region[stripes] * 0.3


def make_scene(
    rng: np.random.Generator, w: int = 160, h: int = 96, n_objects: Tuple[int, int] = (1, 4), max_iou: float = 0.3
) -> Tuple[np.ndarray, List[Annotation]]:
    """An (h, w, 3) float image in [0, 1] and its box annotations (class ids 0-2)."""
    img = _background(rng, w, h)
    anns: List[Annotation] = []
    target = int(rng.integers(n_objects[0], n_objects[1] + 1))
    attempts = 0
    while len(anns) < target and attempts < 50:
        attempts += 1
        cls = int(rng.integers(0, 3))
        hmin, hmax, amin, amax = _SHAPES[cls]
        bh = int(rng.integers(hmin, min(hmax, h - 2) + 1))
        bw = int(np.clip(round(bh * rng.uniform(amin, amax)), 4, w - 2))
        x1 = int(rng.integers(0, w - bw + 1))
        y1 = int(rng.integers(0, h - bh + 1))
        box = (x1, y1, x1 + bw, y1 + bh)
        if anns and box_iou(np.array([box]), np.array([a.box for a in anns])).max() > max_iou:
            continue
        _draw_object(img, cls, box, rng)
        anns.append(Annotation(cls, box))
    return np.clip(img, 0.0, 1.0), anns


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
