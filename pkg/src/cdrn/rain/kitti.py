"""KITTI 2D label parsing and the JSON annotation format used by the paired dataset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from ..detector.config import DEFAULT_CLASSES, Annotation

DONT_CARE = "DontCare"


class LabelParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class LabelSet:
    annotations: List[Annotation] = field(default_factory=list)
    ignore: List[Tuple[float, float, float, float]] = field(default_factory=list)


def parse_kitti_labels(text: str, classes: Sequence[str] = DEFAULT_CLASSES) -> LabelSet:
    """Keep configured classes' 2D boxes (fields 5-8); DontCare boxes go to the ignore list."""
    out = LabelSet()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 8:
            raise LabelParseError(line_no, f"expected at least 8 fields, got {len(fields)}")
        kind = fields[0]
        try:
            box = tuple(float(v) for v in fields[4:8])
            float(fields[1]), int(float(fields[2])), float(fields[3])
        except ValueError as exc:
            raise LabelParseError(line_no, f"non-numeric field ({exc})") from None
        if kind == DONT_CARE:
            out.ignore.append(box)
            continue
        if kind not in classes:
            continue
        try:
            out.annotations.append(Annotation(list(classes).index(kind), box))
        except ValueError as exc:
            raise LabelParseError(line_no, str(exc)) from None
    return out


def labels_to_json(labels: LabelSet, classes: Sequence[str] = DEFAULT_CLASSES) -> dict:
    return {
        "objects": [{"class": classes[a.cls], "box": list(a.box)} for a in labels.annotations],
        "ignore": [list(b) for b in labels.ignore],
    }


def labels_from_json(d: dict, classes: Sequence[str] = DEFAULT_CLASSES) -> LabelSet:
    anns = [Annotation(list(classes).index(o["class"]), tuple(o["box"])) for o in d.get("objects", [])]
    return LabelSet(anns, [tuple(b) for b in d.get("ignore", [])])
