from .config import DEFAULT_CLASSES, Annotation, DetectorConfig, Detection
from .model import FCOS, FPN, Backbone, BasicBlock, Head, HeadOutputs, level_locations, pyramid_sizes
from .targets import (
    BACKGROUND,
    AssignedTargets,
    assign_targets,
    box_area,
    box_iou,
    centerness_target,
    decode_detections,
    decode_image,
    decode_ltrb,
    nms,
)

__all__ = [
    "BACKGROUND",
    "DEFAULT_CLASSES",
    "Annotation",
    "AssignedTargets",
    "Backbone",
    "BasicBlock",
    "DetectorConfig",
    "Detection",
    "FCOS",
    "FPN",
    "Head",
    "HeadOutputs",
    "assign_targets",
    "box_area",
    "box_iou",
    "centerness_target",
    "decode_detections",
    "decode_image",
    "decode_ltrb",
    "level_locations",
    "nms",
    "pyramid_sizes",
]
