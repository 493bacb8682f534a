"""Image quality (PSNR, SSIM) and COCO-style detection metrics, plus report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad, precision
from .detector.config import Annotation, Detection
from .detector.targets import box_iou
from .losses import SSIMParams, ssim_map

PSNR_CAP = 100.0
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
PROTOCOL = "COCO-style: IoU 0.50:0.05:0.95, 101-point interpolated AP, AR@100 per image"


def psnr(x: np.ndarray, y: np.ndarray, max_val: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(max_val * max_val / mse))


def ssim_metric(x: np.ndarray, y: np.ndarray, p: SSIMParams = SSIMParams()) -> float:
    """Mean SSIM of (N, C, H, W) or (C, H, W) images, evaluated in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 3:
        x, y = x[None], y[None]
    with precision("f64"), no_grad():
        return float(ssim_map(Tensor(x), y, p)[1].item())


# ---------------------------------------------------------------------------
# detection metrics
# ---------------------------------------------------------------------------

def _ignored(boxes: np.ndarray, ignore: Sequence, min_overlap: float = 0.5) -> np.ndarray:
    """Detections whose area lies mostly inside an ignore region."""
    if len(boxes) == 0 or not ignore:
        return np.zeros(len(boxes), dtype=bool)
    ign = np.asarray(ignore, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(boxes[:, None, 0], ign[None, :, 0])
    y1 = np.maximum(boxes[:, None, 1], ign[None, :, 1])
    x2 = np.minimum(boxes[:, None, 2], ign[None, :, 2])
    y2 = np.minimum(boxes[:, None, 3], ign[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return (inter / np.maximum(area[:, None], 1e-12)).max(axis=1) >= min_overlap


def greedy_match(det_boxes: np.ndarray, det_scores: np.ndarray, gt_boxes: np.ndarray, thr: float) -> np.ndarray:
    """Score-ordered greedy matching; returns the matched gt index per detection (-1 if none).

    Detections are visited by descending score (stable); each takes the
    unmatched gt of highest IoU >= thr, lower gt index on ties.
    """
    matched = np.full(len(det_boxes), -1, dtype=np.int64)
    if len(det_boxes) == 0 or len(gt_boxes) == 0:
        return matched
    iou = box_iou(det_boxes, gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    for d in np.argsort(-np.asarray(det_scores), kind="stable"):
        cand = np.where(taken, -1.0, iou[d])
        g = int(np.argmax(cand))
        if cand[g] >= thr:
            matched[d] = g
            taken[g] = True
    return matched


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a score-sorted TP indicator sequence."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, 1e-12)
    envelope = np.maximum.accumulate(prec[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class ClassThresholdStats:
    scores: np.ndarray
    tp: np.ndarray
    n_gt: int


def _per_class_threshold(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[Annotation]],
    cls: int,
    thr: float,
    ignore: Optional[Sequence[Sequence]] = None,
    max_dets: Optional[int] = None,
) -> ClassThresholdStats:
    scores, tps, n_gt = [], [], 0
    for i, (img_dets, img_gts) in enumerate(zip(dets, gts)):
        d = [x for x in img_dets if x.cls == cls]
        d.sort(key=lambda x: -x.score)
        if max_dets is not None:
            d = d[:max_dets]
        g = np.array([a.box for a in img_gts if a.cls == cls], dtype=np.float64).reshape(-1, 4)
        n_gt += len(g)
        boxes = np.array([x.box for x in d], dtype=np.float64).reshape(-1, 4)
        sc = np.array([x.score for x in d], dtype=np.float64)
        matched = greedy_match(boxes, sc, g, thr)
        keep = (matched >= 0) | ~_ignored(boxes, ignore[i] if ignore else ())
        scores.append(sc[keep])
        tps.append((matched >= 0)[keep].astype(np.float64))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    tps = np.concatenate(tps) if tps else np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    return ClassThresholdStats(scores[order], tps[order], n_gt)


@dataclass
class DetectionMetrics:
    value: float
    per_class: Dict[int, float] = field(default_factory=dict)
    per_threshold: Dict[float, float] = field(default_factory=dict)


def _classes_with_gt(gts: Sequence[Sequence[Annotation]], num_classes: int) -> List[int]:
    present = {a.cls for img in gts for a in img}
    return [c for c in range(num_classes) if c in present]


def compute_map(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[Annotation]],
    num_classes: int,
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    ignore: Optional[Sequence[Sequence]] = None,
) -> DetectionMetrics:
    """Mean over (classes with ground truth) x thresholds of 101-point AP.

    Detections mostly inside an ignore (DontCare) region and left unmatched are
    dropped instead of counting as false positives.
    """
    classes = _classes_with_gt(gts, num_classes)
    if not classes:
        return DetectionMetrics(0.0)
    table = np.zeros((len(classes), len(iou_thresholds)))
    for ci, c in enumerate(classes):
        for ti, t in enumerate(iou_thresholds):
            st = _per_class_threshold(dets, gts, c, t, ignore)
            table[ci, ti] = interpolated_ap(st.tp, st.n_gt)
    return DetectionMetrics(
        float(table.mean()),
        {c: float(table[i].mean()) for i, c in enumerate(classes)},
        {float(t): float(table[:, j].mean()) for j, t in enumerate(iou_thresholds)},
    )


def compute_mar(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[Annotation]],
    num_classes: int,
    max_dets: int = 100,
    iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
    ignore: Optional[Sequence[Sequence]] = None,
) -> DetectionMetrics:
    """Mean over (classes with ground truth) x thresholds of recall using each image's top ``max_dets``."""
    classes = _classes_with_gt(gts, num_classes)
    if not classes:
        return DetectionMetrics(0.0)
    table = np.zeros((len(classes), len(iou_thresholds)))
    for ci, c in enumerate(classes):
        for ti, t in enumerate(iou_thresholds):
            st = _per_class_threshold(dets, gts, c, t, ignore, max_dets=max_dets)
            table[ci, ti] = st.tp.sum() / st.n_gt
    return DetectionMetrics(
        float(table.mean()),
        {c: float(table[i].mean()) for i, c in enumerate(classes)},
        {float(t): float(table[:, j].mean()) for j, t in enumerate(iou_thresholds)},
    )


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("model", "PSNR", "SSIM", "mAP", "mAR")


@dataclass
class ReportRow:
    model: str
    psnr: float
    ssim: float
    map: float
    mar: float

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError(f"SSIM {self.ssim} outside [-1, 1]")
        for name in ("map", "mar"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")

    def cells(self) -> List[str]:
        return [self.model, f"{self.psnr:.2f}", f"{self.ssim:.4f}", f"{self.map:.4f}", f"{self.mar:.4f}"]


@dataclass
class EvalReport:
    rows: List[ReportRow]
    dataset: str = ""
    config_checksum: str = ""
    protocol: str = PROTOCOL


def render_markdown(report: EvalReport) -> str:
    lines = [
        "# Deraining and detection evaluation",
        "",
        f"- dataset: {report.dataset}",
        f"- config checksum: {report.config_checksum}",
        f"- detection protocol: {report.protocol}",
        "",
        "| " + " | ".join(REPORT_COLUMNS) + " |",
        "|" + "|".join(["---"] + ["---:"] * (len(REPORT_COLUMNS) - 1)) + "|",
    ]
    for row in report.rows:
        lines.append("| " + " | ".join(row.cells()) + " |")
    return "\n".join(lines) + "\n"


def render_csv(report: EvalReport) -> str:
    """Full-precision CSV; ``repr`` of each float so parsing restores it exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in report.rows:
        writer.writerow([r.model, repr(float(r.psnr)), repr(float(r.ssim)), repr(float(r.map)), repr(float(r.mar))])
    return buf.getvalue()


def parse_csv(text: str) -> List[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != REPORT_COLUMNS:
        raise ValueError(f"unexpected report header {header}")
    return [ReportRow(m, float(p), float(s), float(a), float(r)) for m, p, s, a, r in reader]


def emit_report(report: EvalReport, out_dir=None) -> Tuple[str, str]:
    """Render markdown + CSV (rows in the given order); write report.md/.csv when ``out_dir`` is set."""
    md, text = render_markdown(report), render_csv(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(md)
        (out / "report.csv").write_text(text)
    return md, text


def write_metrics_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
