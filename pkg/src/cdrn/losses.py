"""Training objectives: SSIM, deraining losses, FCOS detection losses and stage-weighted totals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ShapeError, Tensor, ops
from .detector.config import DetectorConfig
from .detector.model import HeadOutputs, level_locations
from .detector.targets import BACKGROUND, AssignedTargets, assign_targets


class ContractError(RuntimeError):
    """A loss was requested outside the conditions it is defined for."""


# ---------------------------------------------------------------------------
# SSIM
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    # exponents on luminance, contrast and structure
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be a positive odd size, got {self.window}")
        if self.sigma <= 0 or self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise ValueError("SSIM sigma, constants and dynamic range must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2.0

    @property
    def unit_exponents(self) -> bool:
        return self.alpha == 1.0 and self.beta == 1.0 and self.gamma == 1.0


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-d Gaussian taps; the 2-d window is their outer product."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _gaussian_filter(x: Tensor, p: SSIMParams) -> Tensor:
    """Separable valid-mode Gaussian filtering of every (n, c) plane."""
    n, c, h, w = x.shape
    g = gaussian_window(p.window, p.sigma).astype(x.dtype)
    planes = ops.reshape(x, (n * c, 1, h, w))
    planes = ops.conv2d(planes, Tensor(g.reshape(1, 1, p.window, 1)))
    planes = ops.conv2d(planes, Tensor(g.reshape(1, 1, 1, p.window)))
    return ops.reshape(planes, (n, c, h - p.window + 1, w - p.window + 1))


def ssim_map(x: Tensor, y, p: SSIMParams = SSIMParams(), three_factor: bool = False) -> Tuple[Tensor, Tensor]:
    """Per-pixel SSIM over window positions fully inside the image, and its mean.

    ``y`` may be a tensor or a constant array. With unit exponents the product
    of contrast and structure terms collapses (C3 = C2 / 2) to the usual
    two-factor form, which is used unless ``three_factor`` forces the general
    path. Non-integer exponents need nonnegative factor values.
    """
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=x.dtype))
    if x.shape != y.shape:
        raise ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim != 4:
        raise ShapeError(f"ssim expects (N, C, H, W) images, got {x.shape}")
    if min(x.shape[2:]) < p.window:
        raise ShapeError(f"ssim: image {x.shape[2:]} smaller than the {p.window}x{p.window} window")
    n = x.shape[0]
    stats = _gaussian_filter(ops.concat([x, y, x * x, y * y, x * y], axis=0), p)
    mu_x, mu_y, e_xx, e_yy, e_xy = (ops.slice_axis(stats, i * n, (i + 1) * n, axis=0) for i in range(5))
    mu_xy = mu_x * mu_y
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    var_x = e_xx - mu_xx
    var_y = e_yy - mu_yy
    cov = e_xy - mu_xy
    c1, c2 = p.c1, p.c2
    if p.unit_exponents and not three_factor:
        num = (mu_xy * 2.0 + c1) * (cov * 2.0 + c2)
        den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
        smap = num / den
    else:
        sd_x = ops.sqrt(ops.clamp(var_x, 0.0, None) + 1e-12)
        sd_y = ops.sqrt(ops.clamp(var_y, 0.0, None) + 1e-12)
        sd_xy = sd_x * sd_y
        lum = (mu_xy * 2.0 + c1) / (mu_xx + mu_yy + c1)
        con = (sd_xy * 2.0 + c2) / (var_x + var_y + c2)
        struct = (cov + p.c3) / (sd_xy + p.c3)
        smap = _pow(lum, p.alpha) * _pow(con, p.beta) * _pow(struct, p.gamma)
    return smap, ops.mean(smap)


def _pow(t: Tensor, e: float) -> Tensor:
    return t if e == 1.0 else ops.power(t, e)


def ssim(x: Tensor, y, p: SSIMParams = SSIMParams()) -> Tensor:
    return ssim_map(x, y, p)[1]


# ---------------------------------------------------------------------------
# deraining losses
# ---------------------------------------------------------------------------

def l_derain(
    stage: int,
    clean,
    outputs: Sequence[Tensor],
    include_mse: Optional[bool] = None,
    p: SSIMParams = SSIMParams(),
) -> Tensor:
    """Summed over supervised outputs: 1 - SSIM at stage 2, 1 - SSIM + pixel-mean MSE at stage 3.

    ``include_mse`` overrides the stage default (used by the ablation toggle).
    """
    if stage not in (2, 3):
        raise ContractError(f"the deraining loss is not defined at stage {stage}")
    if not outputs:
        raise ValueError("l_derain needs at least one supervised output")
    use_mse = (stage == 3) if include_mse is None else include_mse
    clean_data = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    total = None
    for out in outputs:
        target = clean_data.astype(out.dtype, copy=False)
        term = 1.0 - ssim(out, target, p)
        if use_mse:
            term = term + ops.mse(out, target)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# detection losses
# ---------------------------------------------------------------------------

def _zero_like(t: Tensor) -> Tensor:
    """A graph-connected zero, so optimizers still see gradients (all zeros)."""
    return ops.sum(t) * 0.0


def focal_loss(
    cls_logits: Tensor,
    targets: np.ndarray,
    alpha: Optional[float] = 0.25,
    gamma: float = 2.0,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Sigmoid focal loss summed over all entries / max(1, #positives).

    ``targets`` is a one-hot array of the logits' shape. ``alpha=None``
    disables class-balance weighting; ``gamma=0`` reduces to cross-entropy.
    """
    targets = np.asarray(targets, dtype=cls_logits.dtype)
    if targets.shape != cls_logits.shape:
        raise ShapeError(f"focal_loss: targets {targets.shape} vs logits {cls_logits.shape}")
    if normalizer is None:
        normalizer = max(1.0, float(targets.sum()))
    neg_targets = 1.0 - targets
    # -log p and -log(1 - p)
    nll_pos = ops.neg(ops.log_sigmoid(cls_logits))
    nll_neg = ops.neg(ops.log_sigmoid(ops.neg(cls_logits)))
    if gamma != 0.0:
        p = ops.sigmoid(cls_logits)
        nll_pos = nll_pos * _pow(1.0 - p, gamma)
        nll_neg = nll_neg * _pow(p, gamma)
    w_pos = targets if alpha is None else targets * alpha
    w_neg = neg_targets if alpha is None else neg_targets * (1.0 - alpha)
    loss = ops.sum(nll_pos * w_pos + nll_neg * w_neg)
    return loss * (1.0 / normalizer)


def giou(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise generalized IoU of (P, 4) predicted boxes against constant targets."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.ndim != 2 or pred.shape[1] != 4 or target.shape != pred.shape:
        raise ShapeError(f"giou expects matching (P, 4) boxes, got {pred.shape} and {target.shape}")
    px1, py1, px2, py2 = ops.split(pred, 4, axis=1)
    tx1, ty1, tx2, ty2 = (target[:, i : i + 1] for i in range(4))
    iw = ops.clamp(ops.minimum(px2, tx2) - ops.maximum(px1, tx1), 0.0, None)
    ih = ops.clamp(ops.minimum(py2, ty2) - ops.maximum(py1, ty1), 0.0, None)
    inter = iw * ih
    area_p = (px2 - px1) * (py2 - py1)
    area_t = (tx2 - tx1) * (ty2 - ty1)
    union = (area_p - inter) + area_t
    ew = ops.maximum(px2, tx2) - ops.minimum(px1, tx1)
    eh = ops.maximum(py2, ty2) - ops.minimum(py1, ty1)
    enclose = ew * eh
    iou = inter / union
    g = iou - (enclose - union) / enclose
    return ops.reshape(g, (pred.shape[0],))


def giou_loss(pred: Tensor, target: np.ndarray, weights: Optional[np.ndarray] = None) -> Tensor:
    """Weighted mean of 1 - GIoU; weights default to uniform."""
    if pred.shape[0] == 0:
        return _zero_like(pred)
    per_box = 1.0 - giou(pred, target)
    if weights is None:
        return ops.mean(per_box)
    weights = np.asarray(weights, dtype=pred.dtype).reshape(-1)
    total = float(weights.sum())
    if total <= 0:
        return _zero_like(pred)
    return ops.sum(per_box * weights) * (1.0 / total)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy."""
    targets = np.asarray(targets, dtype=logits.dtype)
    return ops.neg(ops.log_sigmoid(logits) * targets + ops.log_sigmoid(ops.neg(logits)) * (1.0 - targets))


def centerness_loss(ctr_logits: Tensor, ctr_targets: np.ndarray) -> Tensor:
    """Mean BCE over positive locations (inputs hold positives only)."""
    if ctr_logits.size == 0:
        return _zero_like(ctr_logits)
    return ops.mean(bce_with_logits(ctr_logits, ctr_targets))


@dataclass
class DetectionTargets:
    """Batched assignment in flattened (N * L) layout."""

    per_image: List[AssignedTargets]
    locations: np.ndarray  # (L, 2)

    @property
    def num_positive(self) -> int:
        return sum(t.num_positive for t in self.per_image)


def build_targets(outputs: HeadOutputs, annotations: Sequence[Sequence], cfg: DetectorConfig) -> DetectionTargets:
    locs = level_locations(outputs.sizes, cfg.strides)
    per_image = [assign_targets(locs, anns, cfg) for anns in annotations]
    return DetectionTargets(per_image, np.concatenate(locs, axis=0))


def detection_losses(
    outputs: HeadOutputs, targets: DetectionTargets, cfg: DetectorConfig, focal_alpha: float = 0.25, focal_gamma: float = 2.0
) -> Dict[str, Tensor]:
    """The three FCOS terms: classification (focal), regression (GIoU) and center-ness (BCE)."""
    cls, ltrb, ctr = outputs.flatten()
    n, total, c = cls.shape
    labels = np.concatenate([t.labels for t in targets.per_image])
    onehot = np.zeros((n * total, c))
    pos = np.nonzero(labels != BACKGROUND)[0]
    onehot[pos, labels[pos]] = 1.0
    cls_term = focal_loss(cls, onehot.reshape(n, total, c), focal_alpha, focal_gamma)
    if len(pos) == 0:
        return {"cls": cls_term, "reg": _zero_like(ltrb), "ctr": _zero_like(ctr)}

    tgt_ltrb = np.concatenate([t.ltrb for t in targets.per_image])[pos]
    tgt_ctr = np.concatenate([t.centerness for t in targets.per_image])[pos]
    loc = np.tile(targets.locations, (n, 1))[pos]
    pred_ltrb = ops.index_select(ops.reshape(ltrb, (n * total, 4)), pos, axis=0)
    pred_boxes = ltrb_to_boxes(pred_ltrb, loc)
    tgt_boxes = np.concatenate([loc - tgt_ltrb[:, :2], loc + tgt_ltrb[:, 2:]], axis=1)
    reg_term = giou_loss(pred_boxes, tgt_boxes, weights=tgt_ctr)
    ctr_term = centerness_loss(ops.index_select(ops.reshape(ctr, (n * total,)), pos, axis=0), tgt_ctr)
    return {"cls": cls_term, "reg": reg_term, "ctr": ctr_term}


def ltrb_to_boxes(ltrb: Tensor, locations: np.ndarray) -> Tensor:
    """(P, 4) distances around (P, 2) locations -> (x1, y1, x2, y2) boxes."""
    l, t, r, b = ops.split(ltrb, 4, axis=1)
    x = np.asarray(locations[:, 0:1], dtype=ltrb.dtype)
    y = np.asarray(locations[:, 1:2], dtype=ltrb.dtype)
    return ops.concat([ops.neg(l) + x, ops.neg(t) + y, r + x, b + y], axis=1)


def downstream_focal_suite(parts: Dict[str, Tensor]) -> Tensor:
    """Unweighted sum cls + reg + ctr."""
    return parts["cls"] + parts["reg"] + parts["ctr"]


def feature_map_loss(clean_feats: Sequence, derained_feats: Sequence[Tensor], backbone=None) -> Tensor:
    """Mean over pyramid inputs (C3..C5) of the MSE between clean and derained features.

    When ``backbone`` is given it must be frozen, so no gradient can reach
    detector parameters.
    """
    if backbone is not None and not backbone.frozen:
        raise ContractError("feature-map loss requires a frozen detector backbone")
    if len(clean_feats) != len(derained_feats) or not derained_feats:
        raise ShapeError(f"feature-map loss: {len(clean_feats)} clean vs {len(derained_feats)} derained levels")
    total = None
    for cf, df in zip(clean_feats, derained_feats):
        target = (cf.data if isinstance(cf, Tensor) else np.asarray(cf)).astype(df.dtype, copy=False)
        term = ops.mse(df, target)
        total = term if total is None else total + term
    return total * (1.0 / len(derained_feats))


# ---------------------------------------------------------------------------
# stage weighting
# ---------------------------------------------------------------------------

DOWNSTREAM_FORMS = ("focal", "feature", "none")
DERAIN_FORMS = ("none", "ssim", "ssim+mse")


@dataclass(frozen=True)
class StageWeights:
    a: float
    beta: float
    downstream: str
    derain: str

    def __post_init__(self):
        if self.downstream not in DOWNSTREAM_FORMS:
            raise ValueError(f"unknown downstream form {self.downstream!r}")
        if self.derain not in DERAIN_FORMS:
            raise ValueError(f"unknown derain form {self.derain!r}")

    @classmethod
    def for_stage(cls, stage: int, feature_loss: bool = True, mse_term: bool = True) -> "StageWeights":
        """Per-stage defaults; the two flags switch off the stage-2 feature loss and stage-3 MSE."""
        if stage == 1:
            return cls(0.0, 1.0, "focal", "none")
        if stage == 2:
            if not feature_loss:
                return cls(1.0, 0.0, "none", "ssim")
            return cls(1.0, 0.1, "feature", "ssim")
        if stage == 3:
            return cls(1.0, 0.5, "focal", "ssim+mse" if mse_term else "ssim")
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")


@dataclass
class LossParts:
    derain: Optional[Tensor] = None
    downstream: Optional[Tensor] = None
    derain_form: str = "none"
    downstream_form: str = "none"


def total_loss(stage: int, parts: LossParts, w: StageWeights) -> Tensor:
    """a * L_derain + beta * L_downstream, dropping zero-weighted terms entirely."""
    if parts.derain_form != w.derain or parts.downstream_form != w.downstream:
        raise ContractError(
            f"stage {stage} expects derain={w.derain!r}, downstream={w.downstream!r}; "
            f"got derain={parts.derain_form!r}, downstream={parts.downstream_form!r}"
        )
    terms = []
    if w.a != 0.0:
        if parts.derain is None:
            raise ContractError(f"stage {stage} needs a deraining loss")
        terms.append(parts.derain if w.a == 1.0 else parts.derain * w.a)
    if w.beta != 0.0:
        if parts.downstream is None:
            raise ContractError(f"stage {stage} needs a downstream loss")
        terms.append(parts.downstream if w.beta == 1.0 else parts.downstream * w.beta)
    if not terms:
        raise ContractError(f"stage {stage} has no active loss terms")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
