"""Differentiable ops over :class:`Tensor`.

Broadcasting is intentionally absent: binary ops need equal shapes, with two
exceptions spelled out as their own ops (``channel_scale`` for an
``(N, C, 1, 1)`` gate and ``scalar_scale`` for a one-element tensor) and
Python scalars, which act as constants.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_result

Operand = Union[Tensor, np.ndarray, float, int]


def _split_operand(x: Operand):
    """Return (tensor-or-None, raw data) for a binary-op operand."""
    if isinstance(x, Tensor):
        return x, x.data
    if isinstance(x, np.ndarray):
        return None, x
    return None, x  # python scalar


def _check_same(a: np.ndarray, b, op: str) -> None:
    if isinstance(b, np.ndarray) and b.shape != a.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "add")
    parents = (a,) if bt is None else (a, bt)
    return make_result(a.data + bd, parents, lambda g: (g, g), "add")


def sub(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "sub")
    parents = (a,) if bt is None else (a, bt)
    return make_result(a.data - bd, parents, lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "mul")
    ad = a.data
    parents = (a,) if bt is None else (a, bt)
    return make_result(ad * bd, parents, lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "div")
    out = a.data / bd
    parents = (a,) if bt is None else (a, bt)
    return make_result(out, parents, lambda g: (g / bd, -g * out / bd), "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return make_result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    p = float(exponent)
    if p == 2.0:
        return make_result(x * x, (a,), lambda g: (2.0 * g * x,), "square")
    return make_result(x**p, (a,), lambda g: (g * p * x ** (p - 1.0),), "power")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def minimum(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "minimum")
    pick_a = a.data <= bd
    parents = (a,) if bt is None else (a, bt)
    return make_result(
        np.where(pick_a, a.data, bd), parents, lambda g: (g * pick_a, g * ~pick_a), "minimum"
    )


def maximum(a: Tensor, b: Operand) -> Tensor:
    a = as_tensor(a)
    bt, bd = _split_operand(b)
    _check_same(a.data, bd, "maximum")
    pick_a = a.data >= bd
    parents = (a,) if bt is None else (a, bt)
    return make_result(
        np.where(pick_a, a.data, bd), parents, lambda g: (g * pick_a, g * ~pick_a), "maximum"
    )


def clamp(a: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    x = a.data
    factor = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return make_result(x * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a: Tensor) -> Tensor:
    s = _stable_sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return make_result(out.astype(x.dtype), (a,), lambda g: (g * _stable_sigmoid(-x),), "log_sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (a,), fn, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    return make_result(
        out, (a,), lambda g: (np.array(_expand_reduced(g, shape, axis, keepdims)),), "sum"
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.size / max(out.size, 1)

    def fn(g):
        return (np.array(_expand_reduced(g / count, shape, axis, keepdims)),)

    return make_result(out, (a,), fn, "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),),
        "transpose",
    )


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for i, t in enumerate(tensors):
        if t.ndim != len(ref) or any(t.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat along axis {axis}: input {i} has shape {t.shape}, expected {ref} off-axis")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, fn, "concat")


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    shape = a.shape
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(a.data[index]), (a,), fn, "slice")


def split(a: Tensor, parts: Union[int, Sequence[int]], axis: int = 1) -> List[Tensor]:
    """Split into ``parts`` equal pieces (int) or pieces of the listed sizes."""
    extent = a.shape[axis]
    if isinstance(parts, int):
        if parts < 1 or extent % parts:
            raise ShapeError(f"split: axis {axis} of extent {extent} not divisible into {parts} parts")
        sizes = [extent // parts] * parts
    else:
        sizes = list(parts)
        if np.sum(sizes) != extent:
            raise ShapeError(f"split: sizes {sizes} do not sum to axis {axis} extent {extent}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def index_select(a: Tensor, index: np.ndarray, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; repeated indices accumulate in backward."""
    index = np.asarray(index, dtype=np.int64)
    shape = a.shape

    def fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (slice(None),) * (axis % len(shape)) + (index,), g)
        return (full,)

    return make_result(np.take(a.data, index, axis=axis), (a,), fn, "index_select")


def global_avg_pool(a: Tensor) -> Tensor:
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects N,C,H,W; got {a.shape}")
    return mean(a, axis=(2, 3), keepdims=True)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply an (N, C, H, W) map by a per-(n, c) gate of shape (N, C, 1, 1)."""
    n, c = x.shape[:2]
    if x.ndim != 4 or s.shape != (n, c, 1, 1):
        raise ShapeError(f"channel_scale: gate {s.shape} does not match {x.shape[:2]} + (1, 1)")
    xd, sd = x.data, s.data
    return make_result(
        xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=(2, 3), keepdims=True)), "channel_scale"
    )


def scalar_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply by a learnable one-element tensor."""
    if s.size != 1:
        raise ShapeError(f"scalar_scale: scale must have one element, got {s.shape}")
    xd, sd = x.data, s.data
    k = sd.reshape(())
    return make_result(
        xd * k, (x, s), lambda g: (g * k, np.asarray((g * xd).sum()).reshape(sd.shape)), "scalar_scale"
    )


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` for x of shape (N, in) and w of shape (out, in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data
        return make_result(out, (x, w, b), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "linear")
    return make_result(out, (x, w), lambda g: (g @ wd, g.T @ xd), "linear")


def mse(x: Tensor, y: Operand) -> Tensor:
    """Mean squared error; ``y`` may be a tracked tensor or a constant array."""
    yt, yd = _split_operand(y)
    if np.shape(yd) != x.shape:
        raise ShapeError(f"mse: shapes {x.shape} and {np.shape(yd)} differ")
    diff = x.data - yd
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=x.dtype)

    def fn(g):
        gx = (2.0 / n) * g * diff
        return (gx, -gx)

    parents = (x,) if yt is None else (x, yt)
    return make_result(out, parents, fn, "mse")


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
    return make_result(
        out, (x,), lambda g: (np.ascontiguousarray(g[:, :, top:top + h, left:left + w]),), "pad2d"
    )


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    h, w = x.shape[2:]
    if top < 0 or left < 0 or top + height > h or left + width > w:
        raise ShapeError(f"crop2d: window ({top}, {left}, {height}, {width}) exceeds {h}x{w}")

    def fn(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    return make_result(
        np.ascontiguousarray(x.data[:, :, top:top + height, left:left + width]), (x,), fn, "crop2d"
    )


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), fn, "upsample_nearest")


def group_norm(
    x: Tensor, groups: int, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    """Normalize each group of C/groups channels per sample, then an optional per-channel affine."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects N,C,H,W; got {x.shape}")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xd = x.data.reshape(n, groups, c // groups, h, w)
    axes = (2, 3, 4)
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (centered * inv_std).reshape(n, c, h, w)
    if weight is not None:
        if weight.shape != (c,) or bias is None or bias.shape != (c,):
            raise ShapeError(f"group_norm: affine terms must both have shape ({c},)")
        gamma = weight.data.reshape(1, c, 1, 1)
        out = xhat * gamma + bias.data.reshape(1, c, 1, 1)
        parents = (x, weight, bias)
    else:
        gamma = None
        out = xhat
        parents = (x,)

    def fn(g):
        gh = (g * gamma if gamma is not None else g).reshape(n, groups, c // groups, h, w)
        xh = xhat.reshape(gh.shape)
        gx = inv_std * (gh - gh.mean(axis=axes, keepdims=True) - xh * (gh * xh).mean(axis=axes, keepdims=True))
        gx = gx.reshape(n, c, h, w)
        if gamma is None:
            return (gx,)
        return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return make_result(out.astype(x.dtype, copy=False), parents, fn, "group_norm")


def instance_norm(
    x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5
) -> Tensor:
    """Normalize each (n, c) plane to zero mean / unit variance, then optional affine."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects N,C,H,W; got {x.shape}")
    return group_norm(x, x.shape[1], weight, bias, eps)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last padded input (N, Hp, Wp, C) -> patch matrix (N*Ho*Wo, kh*kw*C)."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    h_end, w_end = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i * kw + j, :] = xp[:, i : i + h_end : stride, j : j + w_end : stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches into a channels-last image of ``shape``."""
    n, _, _, c = shape
    patches = cols.reshape(n, ho, wo, kh * kw, c)
    out = np.zeros(shape, dtype=cols.dtype)
    h_end, w_end = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + h_end : stride, j : j + w_end : stride, :] += patches[:, :, :, i * kw + j, :]
    return out


def _to_nhwc(a: np.ndarray, pad: int = 0) -> np.ndarray:
    n, c, h, w = a.shape
    if not pad:
        return np.ascontiguousarray(a.transpose(0, 2, 3, 1))
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=a.dtype)
    out[:, pad : pad + h, pad : pad + w, :] = a.transpose(0, 2, 3, 1)
    return out


def _rows_nchw(rows: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    c = rows.shape[1]
    return np.ascontiguousarray(rows.reshape(n, h, w, c).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (N, Cin, H, W) with (Cout, Cin, kh, kw) weights."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight; got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels (axis 1) {cin} != weight in-channels (axis 1) {wcin}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    hp, wp = h + 2 * pad, wid + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} (axes 2, 3) smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd, wd = x.data, w.data
    # patch columns are ordered (kh, kw, Cin)
    w_mat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(cout, -1)

    def columns():
        return _im2col(_to_nhwc(xd, pad), kh, kw, stride, ho, wo)

    out_rows = columns() @ w_mat.T
    if b is not None:
        out_rows += b.data
    out = _rows_nchw(out_rows, n, ho, wo)

    def fn(g):
        g_rows = _to_nhwc(g).reshape(-1, cout)
        gx = gw = None
        if x.requires_grad:
            gxp = _col2im(g_rows @ w_mat, (n, hp, wp, cin), kh, kw, stride, ho, wo)
            gx = np.ascontiguousarray(gxp[:, pad : pad + h, pad : pad + wid, :].transpose(0, 3, 1, 2))
        if w.requires_grad:
            cols = columns()  # recomputed rather than held on the tape
            gw = np.ascontiguousarray((g_rows.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
        if b is None:
            return (gx, gw)
        return (gx, gw, g_rows.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, fn, "conv2d")


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 2, pad: int = 0
) -> Tensor:
    """Adjoint of a strided conv2d; weight layout (Cin, Cout, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input and weight; got {x.shape} and {w.shape}")
    n, cin, h, wid = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input channels (axis 1) {cin} != weight axis 0 {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
    hp = (h - 1) * stride + kh
    wp = (wid - 1) * stride + kw
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv_transpose2d: padding {pad} leaves an empty {ho}x{wo} output")

    xd, wd = x.data, w.data
    w_mat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(cin, -1)
    x_rows = _to_nhwc(xd).reshape(-1, cin)
    full = _col2im(x_rows @ w_mat, (n, hp, wp, cout), kh, kw, stride, h, wid)
    out = full[:, pad : pad + ho, pad : pad + wo, :].transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def fn(g):
        cols = _im2col(_to_nhwc(g, pad), kh, kw, stride, h, wid)
        gx = _rows_nchw(cols @ w_mat.T, n, h, wid) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = np.ascontiguousarray((x_rows.T @ cols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2))
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return make_result(out, parents, fn, "conv_transpose2d")
