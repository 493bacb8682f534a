"""Paired clean/rainy dataset construction, manifest and loading."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from ..detector.config import DEFAULT_CLASSES, Annotation
from ..parallel import ordered_map
from .kitti import LabelParseError, LabelSet, labels_from_json, labels_to_json, parse_kitti_labels
from .scenes import make_scene, to_uint8
from .synth import RainParams, composite, gen_streak_layer, image_seed, pad_to_uniform

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SplitSpec:
    train: int
    test: int


FULL_SPLIT = SplitSpec(train=5000, test=1400)


def make_split(names: Sequence[str], spec: SplitSpec, seed: int) -> Dict[str, List[str]]:
    """Seeded disjoint train/test selection; each list keeps the input order."""
    if spec.train < 0 or spec.test < 0:
        raise ValueError(f"split sizes must be nonnegative, got {spec}")
    if spec.train + spec.test > len(names):
        raise ValueError(f"split {spec.train}+{spec.test} exceeds {len(names)} available pairs")
    perm = np.random.default_rng([seed, 7]).permutation(len(names))
    train = set(perm[: spec.train].tolist())
    test = set(perm[spec.train : spec.train + spec.test].tolist())
    return {
        "train": [n for i, n in enumerate(names) if i in train],
        "test": [n for i, n in enumerate(names) if i in test],
    }


@dataclass
class SourceItem:
    """A named clean image whose loader returns (uint8 HxWx3 image, labels)."""

    name: str
    load: Callable[[], Tuple[np.ndarray, LabelSet]]


@dataclass
class ImageSample:
    name: str
    clean: np.ndarray  # (H, W, 3) float in [0, 1], padded
    rainy: np.ndarray
    labels: LabelSet
    original_size: Tuple[int, int]  # (w, h)
    padded_size: Tuple[int, int]
    pads: Tuple[int, int]  # (right, bottom)
    seed: int


def synthesize_sample(name: str, image: np.ndarray, labels: LabelSet, params: RainParams, target: Tuple[int, int]) -> ImageSample:
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name}: expected an 8-bit RGB image, got {image.dtype} {image.shape}")
    padded, anns, rec = pad_to_uniform(image, labels.annotations, *target)
    seed = image_seed(params.seed, name)
    clean = padded.astype(np.float64) / 255.0
    layer = gen_streak_layer(target[0], target[1], params, seed)
    rainy = composite(clean, layer)
    return ImageSample(name, clean, rainy, LabelSet(anns, list(labels.ignore)), rec.original, rec.padded, rec.pads, seed)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr).save(path, format="PNG")


def build_dataset(
    out_dir,
    items: Sequence[SourceItem],
    params: RainParams,
    target: Tuple[int, int],
    split: SplitSpec,
    seed: int,
    classes: Sequence[str] = DEFAULT_CLASSES,
    workers: Optional[int] = None,
) -> dict:
    """Pad, synthesize and write every pair; returns (and writes) the manifest.

    Unreadable images or labels are skipped and listed with their reason.
    Content is a pure function of the inputs, params and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def work(item: SourceItem):
        try:
            image, labels = item.load()
            sample = synthesize_sample(item.name, image, labels, params, target)
        except (OSError, LabelParseError, ValueError) as exc:
            return item.name, None, f"{type(exc).__name__}: {exc}"
        clean_path, rain_path, ann_path = (
            out / f"{item.name}_clean.png", out / f"{item.name}_rain.png", out / f"{item.name}.json"
        )
        _save_png(to_uint8(sample.clean), clean_path)
        _save_png(to_uint8(sample.rainy), rain_path)
        ann = labels_to_json(sample.labels, classes)
        ann.update({"original_size": list(sample.original_size), "padded_size": list(sample.padded_size),
                    "pads": list(sample.pads)})
        ann_path.write_text(json.dumps(ann, sort_keys=True, indent=2) + "\n")
        entry = {
            "name": item.name,
            "clean": clean_path.name,
            "rain": rain_path.name,
            "annotations": ann_path.name,
            "seed": sample.seed,
            "original_size": list(sample.original_size),
            "padded_size": list(sample.padded_size),
            "pads": list(sample.pads),
            "sha256": {k: _sha256(p) for k, p in (("clean", clean_path), ("rain", rain_path), ("annotations", ann_path))},
        }
        return item.name, entry, None

    results = ordered_map(work, items, workers)
    pairs, skipped = [], []
    for name, entry, reason in results:
        if entry is None:
            log.warning("skipping %s: %s", name, reason)
            skipped.append({"name": name, "reason": reason})
        else:
            pairs.append(entry)
    names = [p["name"] for p in pairs]
    manifest = {
        "version": MANIFEST_VERSION,
        "seed": seed,
        "classes": list(classes),
        "params": params.to_dict(),
        "params_checksum": params.checksum(),
        "target_size": list(target),
        "pairs": pairs,
        "split": make_split(names, split, seed),
        "skipped": skipped,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def procedural_items(n: int, w: int, h: int, seed: int, n_objects: Tuple[int, int] = (1, 4)) -> List[SourceItem]:
    def loader(i):
        def load():
            img, anns = make_scene(np.random.default_rng([seed, i]), w, h, n_objects)
            return to_uint8(img), LabelSet(anns, [])
        return load

    return [SourceItem(f"scene_{i:04d}", loader(i)) for i in range(n)]


def kitti_items(image_dir, label_dir, classes: Sequence[str] = DEFAULT_CLASSES) -> List[SourceItem]:
    """One item per PNG in ``image_dir``; its label is ``label_dir/<stem>.txt``."""
    image_dir, label_dir = Path(image_dir), Path(label_dir)

    def loader(img_path: Path):
        def load():
            label_path = label_dir / (img_path.stem + ".txt")
            if not label_path.exists():
                raise OSError(f"missing label file {label_path.name}")
            labels = parse_kitti_labels(label_path.read_text(), classes)
            with Image.open(img_path) as im:
                image = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return image, labels
        return load

    return [SourceItem(p.stem, loader(p)) for p in sorted(image_dir.glob("*.png"))]


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _to_float(images: List[np.ndarray]) -> np.ndarray:
    return np.stack(images).astype(np.float32) / np.float32(255.0)


@dataclass
class PairedDataset:
    names: List[str]
    clean: np.ndarray  # (N, 3, H, W) float32
    rainy: np.ndarray
    annotations: List[List[Annotation]]
    ignore: List[List[Tuple[float, float, float, float]]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def image_size(self) -> Tuple[int, int]:
        return self.clean.shape[2], self.clean.shape[3]

    @classmethod
    def load(cls, root, subset: Optional[str] = "train", verify: bool = False) -> "PairedDataset":
        """Load a subset (``"train"``, ``"test"`` or ``None`` for all pairs) of a built dataset."""
        root = Path(root)
        manifest = json.loads((root / MANIFEST_NAME).read_text())
        classes = manifest["classes"]
        wanted = None if subset is None else set(manifest["split"][subset])
        names, clean, rainy, anns, ignore = [], [], [], [], []
        for entry in manifest["pairs"]:
            if wanted is not None and entry["name"] not in wanted:
                continue
            if verify:
                for key in ("clean", "rain", "annotations"):
                    if _sha256(root / entry[key]) != entry["sha256"][key]:
                        raise ValueError(f"checksum mismatch for {entry[key]}")
            names.append(entry["name"])
            clean.append(read_png(root / entry["clean"]).transpose(2, 0, 1))
            rainy.append(read_png(root / entry["rain"]).transpose(2, 0, 1))
            labels = labels_from_json(json.loads((root / entry["annotations"]).read_text()), classes)
            anns.append(labels.annotations)
            ignore.append(labels.ignore)
        if not names:
            raise ValueError(f"no pairs in subset {subset!r} of {root}")
        return cls(names, _to_float(clean), _to_float(rainy), anns, ignore)
