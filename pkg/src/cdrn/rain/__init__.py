from .dataset import (
    FULL_SPLIT,
    ImageSample,
    PairedDataset,
    SourceItem,
    SplitSpec,
    build_dataset,
    kitti_items,
    make_split,
    procedural_items,
    synthesize_sample,
)
from .kitti import DONT_CARE, LabelParseError, LabelSet, labels_from_json, labels_to_json, parse_kitti_labels
from .scenes import make_scene, to_uint8
from .synth import (
    CATEGORIES,
    PadRecord,
    RainParams,
    StreakCategory,
    affected_pixels,
    blur3,
    composite,
    gen_streak_layer,
    geometry_scale,
    image_seed,
    pad_to_uniform,
)

__all__ = [
    "CATEGORIES",
    "DONT_CARE",
    "FULL_SPLIT",
    "ImageSample",
    "LabelParseError",
    "LabelSet",
    "PadRecord",
    "PairedDataset",
    "RainParams",
    "SourceItem",
    "SplitSpec",
    "StreakCategory",
    "affected_pixels",
    "blur3",
    "build_dataset",
    "composite",
    "gen_streak_layer",
    "geometry_scale",
    "image_seed",
    "kitti_items",
    "labels_from_json",
    "labels_to_json",
    "make_scene",
    "make_split",
    "pad_to_uniform",
    "parse_kitti_labels",
    "procedural_items",
    "synthesize_sample",
    "to_uint8",
]
