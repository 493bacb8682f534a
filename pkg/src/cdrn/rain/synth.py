"""Parametric rain-streak layers, additive compositing and uniform padding."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

CATEGORIES = ("long", "medium", "short")
# size at which the default streak geometry is specified
REFERENCE_SIZE = (1280, 384)
MIN_WIDTH_PX = 1.0


def _check_range(name: str, rng: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = float(rng[0]), float(rng[1])
    if lo > hi:
        raise ValueError(f"{name}: empty range ({lo}, {hi})")
    return lo, hi


@dataclass(frozen=True)
class StreakCategory:
    density: float  # streaks per megapixel
    length: Tuple[float, float]
    width: Tuple[float, float]
    angle: Tuple[float, float]  # degrees from vertical
    intensity: Tuple[float, float]

    def __post_init__(self):
        if self.density < 0:
            raise ValueError(f"density must be >= 0, got {self.density}")
        for name in ("length", "width", "intensity"):
            lo, hi = _check_range(name, getattr(self, name))
            if lo < 0:
                raise ValueError(f"{name} range must be nonnegative, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        object.__setattr__(self, "angle", _check_range("angle", self.angle))


def _default_categories() -> Dict[str, StreakCategory]:
    angle, width, intensity = (-30.0, 30.0), (1.0, 3.0), (0.1, 0.6)
    return {
        "long": StreakCategory(300.0, (40.0, 90.0), width, angle, intensity),
        "medium": StreakCategory(800.0, (15.0, 40.0), width, angle, intensity),
        "short": StreakCategory(2000.0, (5.0, 15.0), width, angle, intensity),
    }


@dataclass(frozen=True)
class RainParams:
    """Streak statistics per category at the reference resolution.

    With ``scale_with_image`` lengths and widths are scaled linearly by the
    ratio of image diagonals (widths floored at one pixel); densities are per
    area and need no scaling.
    """

    categories: Dict[str, StreakCategory] = field(default_factory=_default_categories)
    seed: int = 0
    scale_with_image: bool = True

    def __post_init__(self):
        unknown = set(self.categories) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown streak categories {sorted(unknown)}")

    def with_density_scale(self, factor: float) -> "RainParams":
        cats = {k: replace(c, density=c.density * factor) for k, c in self.categories.items()}
        return replace(self, categories=cats)

    def to_dict(self) -> dict:
        return {
            "categories": {k: asdict(self.categories[k]) for k in CATEGORIES if k in self.categories},
            "seed": self.seed,
            "scale_with_image": self.scale_with_image,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RainParams":
        cats = {k: StreakCategory(**{f: (tuple(v) if isinstance(v, list) else v) for f, v in c.items()})
                for k, c in d["categories"].items()}
        return cls(categories=cats, seed=int(d.get("seed", 0)), scale_with_image=bool(d.get("scale_with_image", True)))

    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def geometry_scale(w: int, h: int) -> float:
    return math.hypot(w, h) / math.hypot(*REFERENCE_SIZE)


def _poisson_count(rng: np.random.Generator, lam: float) -> int:
    """Arrivals of a unit-rate Poisson process in [0, lam].

    For a fixed stream the count is nondecreasing in ``lam``, so denser rain
    on the same seed adds streaks without changing existing ones.
    """
    if lam <= 0:
        return 0
    total, count = 0.0, 0
    chunk = max(16, int(lam * 1.2) + 16)
    while True:
        gaps = rng.exponential(size=chunk)
        cums = total + np.cumsum(gaps)
        inside = int(np.searchsorted(cums, lam, side="right"))
        count += inside
        if inside < chunk:
            return count
        total = float(cums[-1])


def _render_streak(layer: np.ndarray, x0, y0, length, width, angle_deg, intensity) -> None:
    """Add a Gaussian-profile capsule (segment of ``length`` centred at x0, y0) to ``layer``."""
    h, w = layer.shape
    theta = math.radians(angle_deg)
    dx, dy = 0.5 * length * math.sin(theta), 0.5 * length * math.cos(theta)
    ax, ay, bx, by = x0 - dx, y0 - dy, x0 + dx, y0 + dy
    sigma = max(width, 1e-3) / 2.0
    pad = 3.0 * sigma + 1.0
    c0, c1 = max(0, int(math.floor(min(ax, bx) - pad))), min(w, int(math.ceil(max(ax, bx) + pad)) + 1)
    r0, r1 = max(0, int(math.floor(min(ay, by) - pad))), min(h, int(math.ceil(max(ay, by) + pad)) + 1)
    if c0 >= c1 or r0 >= r1:
        return
    py, px = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    px += 0.5
    py += 0.5
    vx, vy = bx - ax, by - ay
    seg2 = vx * vx + vy * vy
    if seg2 > 0:
        t = np.clip(((px - ax) * vx + (py - ay) * vy) / seg2, 0.0, 1.0)
    else:
        t = np.zeros_like(px)
    d2 = (px - (ax + t * vx)) ** 2 + (py - (ay + t * vy)) ** 2
    layer[r0:r1, c0:c1] += intensity * np.exp(-d2 / (2.0 * sigma * sigma))


def blur3(layer: np.ndarray) -> np.ndarray:
    """3x3 binomial ([1, 2, 1] outer product) blur with edge replication."""
    p = np.pad(layer, 1, mode="edge")
    rows = p[:-2, :] + 2.0 * p[1:-1, :] + p[2:, :]
    return (rows[:, :-2] + 2.0 * rows[:, 1:-1] + rows[:, 2:]) / 16.0


def gen_streak_layer(w: int, h: int, params: RainParams, seed: int) -> np.ndarray:
    """Single-channel (h, w) rain layer in [0, 1]; a pure function of (params, seed)."""
    if w <= 0 or h <= 0:
        raise ValueError(f"layer size must be positive, got {w}x{h}")
    scale = geometry_scale(w, h) if params.scale_with_image else 1.0
    total = np.zeros((h, w), dtype=np.float64)
    for idx, name in enumerate(CATEGORIES):
        cat = params.categories.get(name)
        if cat is None:
            continue
        count = _poisson_count(np.random.default_rng([seed, idx, 0]), cat.density * w * h / 1e6)
        if count == 0:
            continue
        u = np.random.default_rng([seed, idx, 1]).random((count, 6))
        wlo = max(cat.width[0] * scale, MIN_WIDTH_PX) if params.scale_with_image else cat.width[0]
        whi = max(cat.width[1] * scale, wlo)
        layer = np.zeros((h, w), dtype=np.float64)
        for ux, uy, ul, uw, ua, ui in u:
            _render_streak(
                layer,
                ux * w,
                uy * h,
                (cat.length[0] + ul * (cat.length[1] - cat.length[0])) * scale,
                wlo + uw * (whi - wlo),
                cat.angle[0] + ua * (cat.angle[1] - cat.angle[0]),
                cat.intensity[0] + ui * (cat.intensity[1] - cat.intensity[0]),
            )
        total += blur3(layer)
    return np.clip(total, 0.0, 1.0)


def composite(clean: np.ndarray, layer: np.ndarray) -> np.ndarray:
    """Additive model: clamp(clean + layer, 0, 1) for an (H, W, 3) image and (H, W) layer."""
    clean = np.asarray(clean, dtype=np.float64)
    if clean.shape[:2] != layer.shape:
        raise ValueError(f"composite: image {clean.shape[:2]} and layer {layer.shape} differ in size")
    add = layer[..., None] if clean.ndim == 3 else layer
    return np.clip(clean + add, 0.0, 1.0)


@dataclass(frozen=True)
class PadRecord:
    original: Tuple[int, int]  # (w, h)
    padded: Tuple[int, int]
    right: int
    bottom: int

    @property
    def pads(self) -> Tuple[int, int]:
        return (self.right, self.bottom)


def pad_to_uniform(image: np.ndarray, annotations: Sequence, target_w: int, target_h: int):
    """Zero-pad right and bottom to the target size; boxes stay as they were."""
    h, w = image.shape[:2]
    if w > target_w or h > target_h:
        raise ValueError(f"image {w}x{h} larger than padding target {target_w}x{target_h}")
    right, bottom = target_w - w, target_h - h
    widths = ((0, bottom), (0, right)) + ((0, 0),) * (image.ndim - 2)
    padded = np.pad(image, widths) if (right or bottom) else image.copy()
    return padded, list(annotations), PadRecord((w, h), (target_w, target_h), right, bottom)


def image_seed(global_seed: int, name: str) -> int:
    """Per-image seed derived from the global seed and the image name."""
    digest = hashlib.sha256(f"{global_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def affected_pixels(layer: np.ndarray, threshold: float = 0.01) -> int:
    return int((layer > threshold).sum())
