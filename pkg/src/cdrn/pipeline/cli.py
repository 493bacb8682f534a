"""Command-line entry point: ``cdrn {synth,train,eval,infer,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from .. import __version__
from ..autodiff import Tensor, no_grad, precision
from ..detector import decode_detections
from ..metrics import PROTOCOL, emit_report, write_metrics_jsonl
from ..rain import FULL_SPLIT, SplitSpec, build_dataset, kitti_items, procedural_items, to_uint8
from ..rain.dataset import read_png
from .checkpoint import CheckpointError, load_checkpoint
from .config import TrainConfig, desk_config, load_config
from .gradsuite import ALL_CASES, run_suite
from .train import (
    ConfigMismatchError,
    PrerequisiteError,
    evaluate,
    load_dataset,
    run_stage,
    state_from_checkpoint,
)

log = logging.getLogger("cdrn")

RUN_MANIFEST = "run_manifest.json"
BOX_COLORS = ((255, 64, 64), (64, 200, 255), (255, 210, 0), (160, 255, 120))


class UsageError(Exception):
    pass


def _resolve_config(args, ckpt=None) -> TrainConfig:
    """--config file, else the config stored in ``ckpt``, else the desk defaults; then CLI overrides."""
    if args.config:
        cfg = load_config(args.config)
    elif ckpt is not None and "config" in ckpt.meta:
        cfg = TrainConfig.from_dict(ckpt.meta["config"])
    else:
        cfg = desk_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    data_dir = getattr(args, "data", None)
    if data_dir:
        cfg = replace(cfg, data=replace(cfg.data, source="dir", root=str(data_dir)))
    return cfg


def _write_run_manifest(out: Path, command: str, cfg: TrainConfig, extra: Optional[dict] = None) -> None:
    """Resolved config and seeds; deliberately free of timestamps so reruns compare equal."""
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_checksum": cfg.checksum(),
        "seeds": {"run": cfg.seed, "rain": cfg.rain.seed, "derain_init": cfg.seed, "detector_init": cfg.seed + 1},
    }
    manifest.update(extra or {})
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    d = cfg.data
    if args.images:
        if not args.labels:
            raise UsageError("--images needs --labels")
        items = kitti_items(args.images, args.labels, cfg.detector.class_names)
        if not items:
            raise UsageError(f"no PNG images found in {args.images}")
    else:
        n = args.count if args.count is not None else d.n_train + d.n_test
        items = procedural_items(n, d.width, d.height, cfg.seed, d.objects_per_scene)
    if args.full_split:
        split = FULL_SPLIT
    else:
        n_test = args.test if args.test is not None else 0
        split = SplitSpec(train=len(items) - n_test, test=n_test)
    params = cfg.rain.with_density_scale(d.rain_density_scale)
    manifest = build_dataset(out, items, params, (d.width, d.height), split, cfg.seed, cfg.detector.class_names)
    if manifest["skipped"]:
        # the split was sized before skips were known
        log.warning("%d inputs skipped; see manifest.json", len(manifest["skipped"]))
    _write_run_manifest(out, "synth", cfg, {"pairs": len(manifest["pairs"])})
    print(f"wrote {len(manifest['pairs'])} pairs to {out} ({len(manifest['skipped'])} skipped)")
    return 0


def _default_init(out: Path, stage: int) -> Optional[Path]:
    candidate = out / f"stage{stage - 1}.ckpt"
    return candidate if stage > 1 and candidate.exists() else None


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(args.out)
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]
    init_path = Path(args.init) if args.init else (None if args.stage == "all" else _default_init(out, stages[0]))
    ckpt = load_checkpoint(init_path) if init_path else None
    dataset = load_dataset(cfg, "train")
    _write_run_manifest(out, f"train --stage {args.stage}", cfg,
                        {"init": str(init_path) if init_path else None, "images": len(dataset)})
    with open(out / "train_log.jsonl", "a" if args.stage != "all" and stages[0] > 1 else "w") as fh:
        for stage in stages:
            result = run_stage(stage, cfg, dataset, ckpt, checkpoint_dir=out)
            for entry in result.epochs:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
            ckpt = result.checkpoint
            last = result.epochs[-1] if result.epochs else {}
            print(f"stage {stage}: {len(result.epochs)} epochs, final total loss {last.get('total', float('nan')):.5f}"
                  f" -> {out / f'stage{stage}.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    state = state_from_checkpoint(ckpt, cfg)
    subset = args.subset
    if subset == "auto":
        subset = "test" if (cfg.data.source == "dir" or cfg.data.n_test > 0) else "train"
    try:
        dataset = load_dataset(cfg, subset)
    except ValueError:
        if args.subset != "auto":
            raise
        subset = "train"
        dataset = load_dataset(cfg, subset)
    if cfg.data.source == "dir":
        name = f"{cfg.data.root} [{subset}, {len(dataset)} images]"
    else:
        name = f"procedural {cfg.data.width}x{cfg.data.height} [{subset}, {len(dataset)} images]"
    report, records, _ = evaluate(state, cfg, dataset, name)
    md, _ = emit_report(report, out)
    write_metrics_jsonl(records, out / "metrics.jsonl")
    _write_run_manifest(out, "eval", cfg, {"checkpoint": str(args.checkpoint), "subset": subset, "protocol": PROTOCOL})
    print(md, end="")
    return 0


def _pad_to(image: np.ndarray, multiple: int):
    h, w = image.shape[:2]
    ph, pw = -h % multiple, -w % multiple
    return np.pad(image, ((0, ph), (0, pw), (0, 0))), (h, w)


def draw_overlay(image: np.ndarray, detections, class_names) -> Image.Image:
    im = Image.fromarray(image)
    draw = ImageDraw.Draw(im)
    for det in detections:
        color = BOX_COLORS[det.cls % len(BOX_COLORS)]
        draw.rectangle(det.box, outline=color, width=2)
        draw.text((det.box[0] + 2, det.box[1] + 1), f"{class_names[det.cls]} {det.score:.2f}", fill=color)
    return im


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = state_from_checkpoint(ckpt, cfg)
    state.derain.eval()
    state.detector.eval()
    raw = read_png(args.image)
    multiple = int(np.lcm(cfg.derain.multiple, 32))
    padded, (h, w) = _pad_to(raw, multiple)
    with precision(cfg.precision), no_grad():
        x = Tensor(padded.transpose(2, 0, 1)[None].astype(np.float32) / 255.0)
        derained = state.derain(x)[1]
        dets = decode_detections(state.detector(derained), cfg.detector)[0]
    derained_img = to_uint8(derained.data[0].transpose(1, 2, 0))[:h, :w]
    names = cfg.detector.class_names
    kept = []
    for d in dets:
        x1, y1, x2, y2 = d.box
        box = (min(x1, w), min(y1, h), min(x2, w), min(y2, h))
        if box[0] < box[2] and box[1] < box[3]:
            kept.append(replace(d, box=box))
    stem = Path(args.image).stem
    Image.fromarray(derained_img).save(out / f"{stem}_derained.png")
    payload = {
        "image": str(args.image),
        "size": [w, h],
        "detections": [{"class": names[d.cls], "box": list(d.box), "score": d.score} for d in kept],
    }
    (out / f"{stem}_detections.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    draw_overlay(derained_img, kept, names).save(out / f"{stem}_overlay.png")
    _write_run_manifest(out, "infer", cfg, {"checkpoint": str(args.checkpoint), "image": str(args.image)})
    print(f"{len(kept)} detections; outputs in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.cases or None
    if names:
        unknown = [n for n in names if n not in ALL_CASES]
        if unknown:
            raise UsageError(f"unknown cases {unknown}; known: {', '.join(ALL_CASES)}")
    report = run_suite(names, seeds=range(args.seeds))
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [r.__dict__ for r in report.results]
        write_metrics_jsonl(rows, out / "gradcheck.jsonl")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults to the desk-scale config)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cdrn", description="Cascaded deraining + detection toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="build a paired clean/rainy dataset")
    s.add_argument("--images", help="directory of clean PNGs (KITTI layout); procedural scenes if omitted")
    s.add_argument("--labels", help="directory of KITTI label .txt files")
    s.add_argument("--count", type=int, help="number of procedural scenes")
    s.add_argument("--test", type=int, help="size of the held-out test split")
    s.add_argument("--full-split", action="store_true", help="5000 train / 1400 test")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="run training stage 1, 2, 3 or all")
    t.add_argument("--stage", required=True, choices=["1", "2", "3", "all"])
    t.add_argument("--init", help="checkpoint to start from (defaults to <out>/stage<N-1>.ckpt)")
    t.add_argument("--data", help="built dataset directory (procedural in-memory scenes if omitted)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint and emit report.md / report.csv")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="built dataset directory")
    e.add_argument("--subset", default="auto", choices=["auto", "train", "test"])
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="derain and detect one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.set_defaults(fn=cmd_infer)

    g = sub.add_parser("gradcheck", parents=[common], help="run the finite-difference gradient suite")
    g.add_argument("--seeds", type=int, default=10, help="seeds per case (default 10)")
    g.add_argument("--cases", nargs="*", help="restrict to these case names")
    g.set_defaults(fn=cmd_gradcheck, out=None)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cdrn: error: {exc}", file=sys.stderr)
        return 2
    except (PrerequisiteError, ConfigMismatchError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"cdrn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
