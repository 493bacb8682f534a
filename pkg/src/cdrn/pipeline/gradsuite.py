"""Finite-difference verification of every differentiable op, block and loss.

Each case builds fresh inputs from a seeded generator and returns a closure
over them; :func:`run_suite` checks every case for a set of seeds in both
the float32 mode (rel err < 1e-3) and the float64 mode (rel err < 1e-6).
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from ..autodiff import Tensor, grad_check, ops
from ..detector.config import Annotation, DetectorConfig
from ..detector.model import FPN, Head, HeadOutputs
from ..losses import (
    SSIMParams,
    bce_with_logits,
    build_targets,
    centerness_loss,
    detection_losses,
    feature_map_loss,
    focal_loss,
    giou,
    giou_loss,
    l_derain,
    ssim_map,
)
from ..nn import CSFF, SAM, ConvTranspose2d, HINBlock, ResBlock, SARBlock, SARConfig
from ..nn.module import Conv2d, Linear

TOLERANCES = {"f32": 1e-3, "f64": 1e-6}
DEFAULT_SEEDS = tuple(range(10))

Case = Callable[[np.random.Generator], Tuple[Callable[[], object], List[Tensor]]]


def _t(rng, *shape, lo=None, hi=None) -> Tensor:
    if lo is not None:
        return Tensor(rng.uniform(lo, hi, size=shape))
    return Tensor(rng.standard_normal(shape))


def _c(arr: np.ndarray, like: Tensor) -> np.ndarray:
    """A constant array in the dtype of the tensor it combines with."""
    return np.asarray(arr, dtype=like.dtype)


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.uniform(0.2, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x)


# ---------------------------------------------------------------------------
# op cases
# ---------------------------------------------------------------------------

def _binary(op, positive_b=False):
    def case(rng):
        a = _t(rng, 3, 4)
        b = Tensor(rng.uniform(0.5, 2.0, (3, 4))) if positive_b else _t(rng, 3, 4)
        return (lambda: op(a, b)), [a, b]
    return case


def _unary(op, lo=-2.0, hi=2.0, shape=(3, 5)):
    def case(rng):
        a = _t(rng, *shape, lo=lo, hi=hi)
        return (lambda: op(a)), [a]
    return case


def _const_operand(rng):
    a = _t(rng, 2, 3)
    c = rng.standard_normal((2, 3))
    return (lambda: ops.div(ops.mul(ops.sub(ops.add(a, _c(c, a)), 0.5), _c(c, a)), 2.0)), [a]


def _softmax(rng):
    a = _t(rng, 2, 3, 4)
    axis = int(rng.integers(0, 3))
    return (lambda: ops.softmax(a, axis=axis)), [a]


def _reductions(rng):
    a = _t(rng, 2, 3, 4)
    return (lambda: (ops.sum(a, axis=1), ops.mean(a, axis=(0, 2), keepdims=True), ops.sum(a))), [a]


def _shape_ops(rng):
    a = _t(rng, 2, 3, 4)
    return (lambda: ops.transpose(ops.reshape(a, (6, 4)), (1, 0))), [a]


def _concat_split(rng):
    a, b = _t(rng, 2, 3, 4), _t(rng, 2, 1, 4)
    def fn():
        joined = ops.concat([a, b], axis=1)
        left, right = ops.split(joined, [1, 3], axis=1)
        return left * 2.0, ops.slice_axis(right, 1, 3, axis=1)
    return fn, [a, b]


def _index_select(rng):
    a = _t(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)  # repeats exercise gradient accumulation
    return (lambda: ops.index_select(a, idx, axis=0)), [a]


def _gap_channel_scalar(rng):
    x, s, k = _t(rng, 2, 3, 4, 4), _t(rng, 2, 3, 1, 1), _t(rng, 1)
    return (lambda: (ops.scalar_scale(ops.channel_scale(x, s), k), ops.global_avg_pool(x))), [x, s, k]


def _linear(rng):
    x, w, b = _t(rng, 4, 5), _t(rng, 3, 5), _t(rng, 3)
    return (lambda: ops.linear(x, w, b)), [x, w, b]


def _mse(rng):
    x, y = _t(rng, 2, 3, 4), _t(rng, 2, 3, 4)
    c = rng.standard_normal((2, 3, 4))
    return (lambda: (ops.mse(x, y), ops.mse(x, _c(c, x)))), [x, y]


def _pad_crop_up(rng):
    x = _t(rng, 1, 2, 3, 4)
    return (lambda: ops.crop2d(ops.upsample_nearest(ops.pad2d(x, 1, 0, 2, 1), 2), 1, 2, 5, 6)), [x]


def _instance_norm(rng):
    x, w, b = _t(rng, 2, 3, 4, 5), _t(rng, 3), _t(rng, 3)
    return (lambda: (ops.instance_norm(x, w, b), ops.instance_norm(x))), [x, w, b]


def _group_norm(rng):
    x, w, b = _t(rng, 2, 6, 3, 4), _t(rng, 6), _t(rng, 6)
    groups = int(rng.choice([1, 2, 3, 6]))
    return (lambda: ops.group_norm(x, groups, w, b)), [x, w, b]


def _conv(rng):
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x, w, b = _t(rng, 2, 3, 6, 5), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    return (lambda: ops.conv2d(x, w, b, stride=stride, pad=pad)), [x, w, b]


def _conv_transpose(rng):
    pad = int(rng.integers(0, 2))
    x, w, b = _t(rng, 2, 3, 3, 4), _t(rng, 3, 2, 2, 2), _t(rng, 2)
    return (lambda: ops.conv_transpose2d(x, w, b, stride=2, pad=pad)), [x, w, b]


def _clamp(rng):
    a = _t(rng, 4, 5, lo=-2.0, hi=2.0)
    return (lambda: (ops.clamp(a, -1.0, 1.0), ops.clamp(a, 0.0, None))), [a]


def _min_max(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    c = rng.standard_normal((3, 4))
    return (lambda: (ops.minimum(a, b), ops.maximum(a, b), ops.maximum(a, _c(c, a)))), [a, b]


OP_CASES: Dict[str, Case] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "neg": _unary(ops.neg),
    "reciprocal": _unary(ops.reciprocal, 0.5, 2.0),
    "power": _unary(lambda a: ops.power(a, 1.7), 0.3, 2.0),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, 0.2, 3.0),
    "sqrt": _unary(ops.sqrt, 0.2, 3.0),
    "relu": lambda rng: (lambda a: ((lambda: ops.relu(a)), [a]))(_away_from_zero(rng, 3, 5)),
    "leaky_relu": lambda rng: (lambda a: ((lambda: ops.leaky_relu(a, 0.2)), [a]))(_away_from_zero(rng, 3, 5)),
    "sigmoid": _unary(ops.sigmoid, -6.0, 6.0),
    "log_sigmoid": _unary(ops.log_sigmoid, -8.0, 8.0),
    "clamp": _clamp,
    "min_max": _min_max,
    "constant_operands": _const_operand,
    "softmax": _softmax,
    "sum_mean": _reductions,
    "reshape_transpose": _shape_ops,
    "concat_split_slice": _concat_split,
    "index_select": _index_select,
    "pooling_and_scales": _gap_channel_scalar,
    "linear": _linear,
    "mse": _mse,
    "pad_crop_upsample": _pad_crop_up,
    "instance_norm": _instance_norm,
    "group_norm": _group_norm,
    "conv2d": _conv,
    "conv_transpose2d": _conv_transpose,
}


# ---------------------------------------------------------------------------
# block cases: the input plus every parameter of the module
# ---------------------------------------------------------------------------

def _module_case(build, make_inputs):
    def case(rng):
        module = build(rng)
        inputs = make_inputs(rng)
        fn = lambda: module(*inputs)
        return fn, list(inputs) + module.parameters()
    return case


def _sar(rng):
    return SARBlock(rng, SARConfig(channels=8, cardinal=2, radix=2, reduction=2))


def _sam_case(rng):
    sam = SAM(rng, 4)
    f, x = _t(rng, 1, 4, 5, 6), _t(rng, 1, 3, 5, 6, lo=0.0, hi=1.0)
    return (lambda: sam(f, x)), [f, x] + sam.parameters()


def _csff_case(rng):
    csff = CSFF(rng, [4, 8])
    e = [_t(rng, 1, 4, 4, 4), _t(rng, 1, 8, 2, 2)]
    d = [_t(rng, 1, 4, 4, 4), _t(rng, 1, 8, 2, 2)]
    return (lambda: csff(e, d)), e + d + csff.parameters()


def _sar_r1(rng):
    return SARBlock(rng, SARConfig(channels=8, cardinal=2, radix=1, reduction=2))


def _fpn_case(rng):
    fpn = FPN(rng, (4, 6, 8), 4)
    feats = [_t(rng, 1, 4, 8, 8), _t(rng, 1, 6, 4, 4), _t(rng, 1, 8, 2, 2)]
    return (lambda: fpn(feats)), feats + fpn.parameters()


_TINY_DET = DetectorConfig(backbone_widths=(4, 4, 4), stem_width=4, blocks_per_stage=1, fpn_channels=4, tower_convs=1, head_norm_groups=2)


def _head_case(rng):
    head = Head(rng, _TINY_DET)
    p = _t(rng, 1, 4, 3, 3)
    level = int(rng.integers(0, 5))
    return (lambda: head(p, level)), [p] + head.parameters()


BLOCK_CASES: Dict[str, Case] = {
    "hin_block": _module_case(lambda rng: HINBlock(rng, 3, 4), lambda rng: [_t(rng, 1, 3, 5, 6)]),
    "sar_block": _module_case(_sar, lambda rng: [_t(rng, 1, 8, 4, 5)]),
    "sar_block_radix1": _module_case(_sar_r1, lambda rng: [_t(rng, 1, 8, 4, 5)]),
    "res_block": _module_case(lambda rng: ResBlock(rng, 4), lambda rng: [_t(rng, 1, 4, 4, 5)]),
    "sam": _sam_case,
    "csff": _csff_case,
    "fpn": _fpn_case,
    "head": _head_case,
    "conv_layer": _module_case(lambda rng: Conv2d(rng, 3, 4, 3, stride=2, pad=1), lambda rng: [_t(rng, 1, 3, 5, 5)]),
    "conv_transpose_layer": _module_case(lambda rng: ConvTranspose2d(rng, 4, 3), lambda rng: [_t(rng, 1, 4, 3, 3)]),
    "linear_layer": _module_case(lambda rng: Linear(rng, 5, 3), lambda rng: [_t(rng, 2, 5)]),
}


# ---------------------------------------------------------------------------
# loss cases
# ---------------------------------------------------------------------------

def _ssim_case(three_factor: bool):
    def case(rng):
        p = SSIMParams(window=5, sigma=1.0)
        x = _t(rng, 1, 2, 7, 8, lo=0.0, hi=1.0)
        y = _t(rng, 1, 2, 7, 8, lo=0.0, hi=1.0)
        return (lambda: ssim_map(x, y, p, three_factor=three_factor)[0]), [x, y]
    return case


def _l_derain_case(rng):
    p = SSIMParams(window=5, sigma=1.0)
    clean = rng.uniform(0, 1, (1, 3, 7, 8))
    o1, o2 = _t(rng, 1, 3, 7, 8, lo=0.0, hi=1.0), _t(rng, 1, 3, 7, 8, lo=0.0, hi=1.0)
    stage = int(rng.integers(2, 4))
    return (lambda: l_derain(stage, clean, [o1, o2], p=p)), [o1, o2]


def _focal_case(rng):
    logits = _t(rng, 2, 6, 3, lo=-4.0, hi=4.0)
    targets = np.zeros((2, 6, 3))
    rows = rng.choice(12, size=4, replace=False)
    targets.reshape(12, 3)[rows, rng.integers(0, 3, size=4)] = 1.0
    gamma = float(rng.choice([0.0, 1.0, 2.0]))
    return (lambda: focal_loss(logits, targets, alpha=0.25, gamma=gamma)), [logits]


def _random_boxes(rng, n, lo=0.0, hi=20.0):
    xy = rng.uniform(lo, hi, (n, 2))
    wh = rng.uniform(2.0, 10.0, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def _giou_case(rng):
    # overlapping and disjoint pairs; coordinates jittered to avoid ties in min/max
    pred = Tensor(_random_boxes(rng, 6))
    target = _random_boxes(rng, 6)
    weights = rng.uniform(0.1, 1.0, 6)
    return (lambda: (giou(pred, target), giou_loss(pred, target, weights))), [pred]


def _bce_case(rng):
    logits = _t(rng, 3, 4, lo=-5.0, hi=5.0)
    targets = rng.uniform(0, 1, (3, 4))
    return (lambda: (bce_with_logits(logits, targets), centerness_loss(ops.reshape(logits, (12,)), targets.reshape(12)))), [logits]


def _feature_case(rng):
    clean = [rng.standard_normal((1, 4, 4, 4)), rng.standard_normal((1, 6, 2, 2))]
    derained = [_t(rng, 1, 4, 4, 4), _t(rng, 1, 6, 2, 2)]
    return (lambda: feature_map_loss(clean, derained)), derained


def _detection_case(rng):
    """The three detection terms on synthetic per-level head outputs of a 64x64 image."""
    sizes = [(8, 8), (4, 4), (2, 2), (1, 1), (1, 1)]
    c = _TINY_DET.num_classes
    cls = [_t(rng, 1, c, h, w) for h, w in sizes]
    raw = [_t(rng, 1, 4, h, w, lo=-0.5, hi=1.0) for h, w in sizes]
    ctr = [_t(rng, 1, 1, h, w) for h, w in sizes]
    annotations = [[Annotation(0, (6.3, 5.1, 40.7, 55.2)), Annotation(1, (20.2, 3.4, 61.1, 30.9))]]

    def fn():
        levels = [(c_, ops.exp(r) * float(s), t) for c_, r, t, s in zip(cls, raw, ctr, _TINY_DET.strides)]
        outputs = HeadOutputs(levels, sizes, (64, 64))
        parts = detection_losses(outputs, build_targets(outputs, annotations, _TINY_DET), _TINY_DET)
        return parts["cls"], parts["reg"], parts["ctr"]

    return fn, cls + raw + ctr


LOSS_CASES: Dict[str, Case] = {
    "ssim": _ssim_case(False),
    "ssim_three_factor": _ssim_case(True),
    "l_derain": _l_derain_case,
    "focal": _focal_case,
    "giou": _giou_case,
    "bce_centerness": _bce_case,
    "feature_map": _feature_case,
    "detection_losses": _detection_case,
}

ALL_CASES: Dict[str, Case] = {**OP_CASES, **BLOCK_CASES, **LOSS_CASES}


@dataclass
class CaseResult:
    name: str
    mode: str
    seed: int
    max_rel_err: float
    n_probed: int
    n_excluded: int
    passed: bool


@dataclass
class SuiteReport:
    results: List[CaseResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.results) and all(r.passed for r in self.results)

    def failures(self) -> List[CaseResult]:
        return [r for r in self.results if not r.passed]

    def worst(self) -> Dict[Tuple[str, str], float]:
        out: Dict[Tuple[str, str], float] = {}
        for r in self.results:
            key = (r.name, r.mode)
            out[key] = max(out.get(key, 0.0), r.max_rel_err)
        return out

    def summary(self) -> str:
        lines = []
        for (name, mode), err in sorted(self.worst().items()):
            seeds = [r for r in self.results if r.name == name and r.mode == mode]
            ok = all(r.passed for r in seeds)
            lines.append(f"{'ok  ' if ok else 'FAIL'} {name:<22} {mode}  seeds={len(seeds):<3} max rel err {err:.2e}")
        verdict = "PASSED" if self.passed else f"FAILED ({len(self.failures())} checks)"
        lines.append(f"{verdict}: {len(self.results)} checks in {self.seconds:.1f}s")
        return "\n".join(lines)


def run_case(name: str, seed: int, mode: str, max_probes: int = 3) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    fn, inputs = ALL_CASES[name](rng)
    rep = grad_check(fn, inputs, tol=TOLERANCES[mode], mode=mode, max_probes=max_probes, seed=seed)
    return CaseResult(name, mode, seed, rep.max_rel_err, rep.n_probed, rep.n_excluded, rep.passed)


def run_suite(
    names: Sequence[str] = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    modes: Sequence[str] = ("f32", "f64"),
    max_probes: int = 3,
) -> SuiteReport:
    names = list(ALL_CASES) if names is None else list(names)
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise KeyError(f"unknown gradient cases {unknown}")
    start = time.perf_counter()
    results = [run_case(n, s, m, max_probes) for n in names for m in modes for s in seeds]
    return SuiteReport(results, time.perf_counter() - start)
