"""Three-stage training: detector on clean images, deraining with a frozen detector, joint fine-tuning."""

from __future__ import annotations

import logging
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..autodiff import Adam, Tensor, no_grad, ops, precision
from ..derain import DerainNet
from ..detector import FCOS, decode_detections
from ..losses import (
    LossParts,
    build_targets,
    detection_losses,
    downstream_focal_suite,
    feature_map_loss,
    l_derain,
    total_loss,
)
from ..metrics import EvalReport, ReportRow, compute_map, compute_mar, psnr, ssim_metric
from ..parallel import ordered_map
from ..rain import LabelSet, PairedDataset, procedural_items, synthesize_sample, to_uint8
from .checkpoint import Checkpoint, optimizer_state, save_checkpoint, split_prefixed
from .config import STAGES, TrainConfig

log = logging.getLogger(__name__)


class PrerequisiteError(RuntimeError):
    """A stage was started without the checkpoint of the stages it builds on."""


class ConfigMismatchError(RuntimeError):
    """A checkpoint was produced under a different configuration."""


REQUIRED = {1: (), 2: (1,), 3: (1, 2)}
LOG_KEYS = ("total", "derain", "feature", "downstream", "cls", "reg", "ctr")


def lr_schedule(stage: int, epoch: int, base_lr: float, halve_epoch: Optional[int] = 30) -> float:
    """Pre-training stages halve the rate from ``halve_epoch`` on; joint training keeps it constant."""
    if stage not in STAGES:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    if stage == 3 or halve_epoch is None or epoch < halve_epoch:
        return base_lr
    return base_lr / 2.0


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def procedural_dataset(cfg: TrainConfig, subset: str = "train") -> PairedDataset:
    """Synthesize the configured procedural scenes in memory, quantized exactly as on disk."""
    d = cfg.data
    offset = 0 if subset == "train" else d.n_train
    count = d.n_train if subset == "train" else d.n_test
    if count < 1:
        raise ValueError(f"procedural {subset} subset is empty")
    params = cfg.rain.with_density_scale(d.rain_density_scale)
    items = procedural_items(offset + count, d.width, d.height, cfg.seed, d.objects_per_scene)[offset:]

    def build(item):
        image, labels = item.load()
        s = synthesize_sample(item.name, image, labels, params, (d.width, d.height))
        return s.name, to_uint8(s.clean), to_uint8(s.rainy), s.labels

    samples = ordered_map(build, items)
    to_f = lambda imgs: np.stack([im.transpose(2, 0, 1) for im in imgs]).astype(np.float32) / np.float32(255.0)
    return PairedDataset(
        [s[0] for s in samples],
        to_f([s[1] for s in samples]),
        to_f([s[2] for s in samples]),
        [s[3].annotations for s in samples],
        [s[3].ignore for s in samples],
    )


def load_dataset(cfg: TrainConfig, subset: str = "train") -> PairedDataset:
    if cfg.data.source == "procedural":
        return procedural_dataset(cfg, subset)
    if not cfg.data.root:
        raise ValueError("data.source 'dir' needs data.root")
    return PairedDataset.load(cfg.data.root, subset)


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    derain: DerainNet
    detector: FCOS
    stages_completed: List[int] = field(default_factory=list)
    step: int = 0

    def tensors(self) -> "OrderedDict[str, np.ndarray]":
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for prefix, model in (("derain", self.derain), ("detector", self.detector)):
            for name, arr in model.state_dict().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def named_parameters(self):
        yield from self.derain.named_parameters("derain.")
        yield from self.detector.named_parameters("detector.")


def build_state(cfg: TrainConfig) -> TrainState:
    """Fresh models: the deraining net is seeded with ``seed``, the detector with ``seed + 1``."""
    with precision(cfg.precision):
        return TrainState(DerainNet(cfg.derain, cfg.seed), FCOS(cfg.detector, cfg.seed + 1))


def check_config(ckpt: Checkpoint, cfg: TrainConfig) -> None:
    found = ckpt.meta.get("config_checksum")
    if found == cfg.checksum():
        return
    msg = f"checkpoint config checksum {found} does not match the current config {cfg.checksum()}"
    if cfg.on_config_mismatch == "fail":
        raise ConfigMismatchError(msg)
    warnings.warn(msg, RuntimeWarning, stacklevel=3)


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig) -> TrainState:
    check_config(ckpt, cfg)
    state = build_state(cfg)
    state.derain.load_state_dict(split_prefixed(ckpt.tensors, "derain"))
    state.detector.load_state_dict(split_prefixed(ckpt.tensors, "detector"))
    state.stages_completed = sorted(int(s) for s in ckpt.meta.get("stages_completed", []))
    state.step = ckpt.step
    return state


def make_checkpoint(state: TrainState, cfg: TrainConfig, stage: int, epoch: int, step_in_epoch: int,
                    optimizer: Optional[Adam] = None, param_names: Sequence[str] = ()) -> Checkpoint:
    opt_tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    opt_meta: Dict = {}
    if optimizer is not None:
        sd = optimizer.state_dict()
        for name, m in zip(param_names, sd["m"]):
            opt_tensors["m:" + name] = m
        for name, v in zip(param_names, sd["v"]):
            opt_tensors["v:" + name] = v
        opt_meta = {k: sd[k] for k in ("lr", "beta1", "beta2", "eps", "t")}
        opt_meta["params"] = list(param_names)
    meta = {
        "stage": stage,
        "epoch": epoch,
        "step": state.step,
        "step_in_epoch": step_in_epoch,
        "stages_completed": sorted(state.stages_completed),
        "config_checksum": cfg.checksum(),
        "config": cfg.to_dict(),
    }
    return Checkpoint(state.tensors(), opt_tensors, opt_meta, meta)


# ---------------------------------------------------------------------------
# one stage
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    checkpoint: Checkpoint
    epochs: List[Dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    interrupted: bool = False


def _configure(stage: int, state: TrainState):
    """Freeze everything outside the stage's trainable set."""
    if stage == 1:
        state.derain.freeze()
        state.detector.unfreeze().train()
    elif stage == 2:
        state.detector.freeze().eval()
        state.derain.unfreeze().train()
    else:
        state.derain.unfreeze().train()
        state.detector.unfreeze().train()
    return [(n, p) for n, p in state.named_parameters() if p.requires_grad]


def _derain_outputs(state: TrainState, rainy: Tensor) -> List[Tensor]:
    out1, out2 = state.derain(rainy)
    return [out1, out2] if state.derain.cfg.supervise_stage1 else [out2]


def _step_loss(stage: int, cfg: TrainConfig, state: TrainState, clean: np.ndarray, rainy: np.ndarray,
               annotations, clean_feats=None):
    """Build the stage's loss graph; returns (total, {component: value})."""
    w = cfg.weights(stage)
    logs: Dict[str, float] = {}
    if stage == 1:
        outputs = state.detector(Tensor(clean))
        parts = detection_losses(outputs, build_targets(outputs, annotations, cfg.detector), cfg.detector)
        downstream = downstream_focal_suite(parts)
        loss = total_loss(1, LossParts(downstream=downstream, downstream_form="focal"), w)
        logs.update({k: parts[k].item() for k in ("cls", "reg", "ctr")})
        logs["downstream"] = downstream.item()
    elif stage == 2:
        outs = _derain_outputs(state, Tensor(rainy))
        derain = l_derain(2, clean, outs, include_mse=False)
        feature = None
        if w.downstream == "feature":
            feature = feature_map_loss(clean_feats, state.detector.backbone(outs[-1]), backbone=state.detector.backbone)
            logs["feature"] = feature.item()
        loss = total_loss(2, LossParts(derain, feature, w.derain, w.downstream), w)
        logs["derain"] = derain.item()
    else:
        outs = _derain_outputs(state, Tensor(rainy))
        derain = l_derain(3, clean, outs, include_mse=(w.derain == "ssim+mse"))
        outputs = state.detector(outs[-1])
        parts = detection_losses(outputs, build_targets(outputs, annotations, cfg.detector), cfg.detector)
        downstream = downstream_focal_suite(parts)
        loss = total_loss(3, LossParts(derain, downstream, w.derain, "focal"), w)
        logs.update({k: parts[k].item() for k in ("cls", "reg", "ctr")})
        logs.update(derain=derain.item(), downstream=downstream.item())
    logs["total"] = loss.item()
    return loss, logs


def epoch_order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, stage, epoch]).permutation(n)


def run_stage(
    stage: int,
    cfg: TrainConfig,
    dataset: PairedDataset,
    init: Optional[Checkpoint] = None,
    checkpoint_dir=None,
    stop_after: Optional[int] = None,
) -> StageResult:
    """Train one stage.

    ``init`` is the checkpoint of the preceding stages, or a mid-stage
    checkpoint of this stage to resume from. ``stop_after`` interrupts after
    that many optimizer steps (used to exercise resumption).
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage}")
    done = [] if init is None else sorted(int(s) for s in init.meta.get("stages_completed", []))
    missing = [s for s in REQUIRED[stage] if s not in done]
    if missing:
        raise PrerequisiteError(
            f"stage {stage} needs a checkpoint that completed stage(s) {', '.join(map(str, missing))}"
            + ("; none was given" if init is None else f"; the given one completed {done or 'none'}")
        )
    sc = cfg.stages[stage]
    with precision(cfg.precision):
        state = build_state(cfg) if init is None else state_from_checkpoint(init, cfg)
        state.stages_completed = [s for s in state.stages_completed if s != stage]
        trainable = _configure(stage, state)
        names = [n for n, _ in trainable]
        opt = Adam([p for _, p in trainable], lr=sc.lr)
        start_epoch, skip = 0, 0
        resuming = init is not None and init.stage == stage and stage not in done and init.optimizer_meta
        if resuming:
            if init.optimizer_meta["params"] != names:
                raise ConfigMismatchError("resumed optimizer state does not match this stage's parameters")
            opt.load_state_dict(optimizer_state(init))
            start_epoch, skip = init.epoch, int(init.meta.get("step_in_epoch", 0))

        clean_feats = None
        if stage == 2 and cfg.weights(2).downstream == "feature":
            with no_grad():
                clean_feats = [[f.data for f in state.detector.backbone(Tensor(dataset.clean[i:i + 1]))]
                               for i in range(len(dataset))]

        result = StageResult(None)
        n, bs = len(dataset), sc.batch_size
        steps_taken = 0
        for epoch in range(start_epoch, sc.epochs):
            opt.lr = lr_schedule(stage, epoch, sc.lr, sc.halve_epoch)
            order = epoch_order(cfg.seed, stage, epoch, n)
            batches = [order[i:i + bs] for i in range(0, n, bs)]
            sums = {k: 0.0 for k in LOG_KEYS}
            counts = {k: 0 for k in LOG_KEYS}
            for b, idx in enumerate(batches):
                if epoch == start_epoch and b < skip:
                    continue
                feats = None
                if clean_feats is not None:
                    feats = [np.concatenate([clean_feats[i][lvl] for i in idx]) for lvl in range(len(clean_feats[0]))]
                loss, logs = _step_loss(stage, cfg, state, dataset.clean[idx], dataset.rainy[idx],
                                        [dataset.annotations[i] for i in idx], feats)
                loss.backward()
                opt.step()
                state.step += 1
                steps_taken += 1
                result.step_losses.append(logs["total"])
                for k, v in logs.items():
                    sums[k] += v
                    counts[k] += 1
                if stop_after is not None and steps_taken >= stop_after:
                    result.interrupted = True
                    result.checkpoint = make_checkpoint(state, cfg, stage, epoch, b + 1, opt, names)
                    if checkpoint_dir is not None:
                        save_checkpoint(result.checkpoint, Path(checkpoint_dir) / f"stage{stage}_interrupted.ckpt")
                    return result
            entry = {"stage": stage, "epoch": epoch, "lr": opt.lr, "steps": len(batches)}
            entry.update({k: sums[k] / counts[k] for k in LOG_KEYS if counts[k]})
            result.epochs.append(entry)
            log.info("stage %d epoch %d: %s", stage, epoch,
                     ", ".join(f"{k}={entry[k]:.5f}" for k in LOG_KEYS if k in entry))
            skip = 0
        state.stages_completed = sorted(set(state.stages_completed) | {stage})
        result.checkpoint = make_checkpoint(state, cfg, stage, sc.epochs, 0, opt, names)
        if checkpoint_dir is not None:
            save_checkpoint(result.checkpoint, Path(checkpoint_dir) / f"stage{stage}.ckpt")
        return result


def run_all(cfg: TrainConfig, dataset: PairedDataset, checkpoint_dir=None, init: Optional[Checkpoint] = None,
            stages: Sequence[int] = STAGES) -> Dict[int, StageResult]:
    results: Dict[int, StageResult] = {}
    ckpt = init
    for stage in stages:
        results[stage] = run_stage(stage, cfg, dataset, ckpt, checkpoint_dir)
        ckpt = results[stage].checkpoint
    return results


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class ImageEval:
    name: str
    derained: np.ndarray  # (3, H, W)
    rainy_dets: list
    derained_dets: list
    clean_dets: list


def _detect(state: TrainState, cfg: TrainConfig, image: np.ndarray):
    return decode_detections(state.detector(Tensor(image[None])), cfg.detector)[0]


def evaluate_images(state: TrainState, cfg: TrainConfig, dataset: PairedDataset, workers: Optional[int] = None):
    state.derain.eval()
    state.detector.eval()

    def one(i):
        with precision(cfg.precision), no_grad():
            rainy = dataset.rainy[i]
            derained = state.derain(Tensor(rainy[None]))[1].data[0]
            return ImageEval(dataset.names[i], derained, _detect(state, cfg, rainy),
                             _detect(state, cfg, derained), _detect(state, cfg, dataset.clean[i]))

    return ordered_map(one, range(len(dataset)), workers)


def evaluate(state: TrainState, cfg: TrainConfig, dataset: PairedDataset, dataset_name: str = "",
             workers: Optional[int] = None):
    """Rows for the rainy input, the derained output and the clean reference; plus per-image records."""
    evals = evaluate_images(state, cfg, dataset, workers)
    k = cfg.detector.num_classes
    gts = dataset.annotations
    ignore = dataset.ignore or None
    derained = np.stack([e.derained for e in evals])
    records = []
    for i, e in enumerate(evals):
        records.append({
            "name": e.name,
            "psnr_rainy": psnr(dataset.rainy[i], dataset.clean[i]),
            "psnr_derained": psnr(e.derained, dataset.clean[i]),
            "ssim_rainy": ssim_metric(dataset.rainy[i], dataset.clean[i]),
            "ssim_derained": ssim_metric(e.derained, dataset.clean[i]),
            "detections_rainy": len(e.rainy_dets),
            "detections_derained": len(e.derained_dets),
        })

    def row(model, images, dets):
        return ReportRow(
            model,
            float(np.mean([psnr(images[i], dataset.clean[i]) for i in range(len(dataset))])),
            ssim_metric(images, dataset.clean),
            compute_map(dets, gts, k, ignore=ignore).value,
            compute_mar(dets, gts, k, max_dets=cfg.detector.max_detections, ignore=ignore).value,
        )

    rows = [
        row("rainy input", dataset.rainy, [e.rainy_dets for e in evals]),
        row("derained", derained, [e.derained_dets for e in evals]),
        row("clean reference", dataset.clean, [e.clean_dets for e in evals]),
    ]
    return EvalReport(rows, dataset=dataset_name, config_checksum=cfg.checksum()), records, evals
