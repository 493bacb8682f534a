"""Dense tensor with tape-recorded reverse-mode differentiation.

Every op that touches a tracked tensor records a node carrying its parents
and a closure mapping the output gradient to parent gradients. Node ids come
from a monotonically increasing counter, so sorting reachable nodes by id in
descending order is a valid reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterator, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class GraphError(RuntimeError):
    """Backward was invoked on an unusable graph."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf value appeared where finite values are required."""


_DTYPES = {"f32": np.float32, "f64": np.float64}

_state = threading.local()
_global = {"dtype": np.float32, "debug": False}
_node_ids = itertools.count()

# Sentinel installed on a node once its backward closure has run.
_CONSUMED = ("consumed", (), None)


def get_dtype():
    return _global["dtype"]


def set_precision(name: str) -> None:
    """Select the default floating dtype: ``"f32"`` (training) or ``"f64"`` (verification)."""
    try:
        _global["dtype"] = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _global["dtype"]
    set_precision(name)
    try:
        yield
    finally:
        _global["dtype"] = previous


def set_debug(enabled: bool) -> None:
    """In debug mode every op output is checked for NaN/Inf."""
    _global["debug"] = bool(enabled)


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._ctx = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node_id = next(_node_ids)
        t._ctx = None
        t.name = None
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar (implemented in ops) ---------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.neg(self), other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.mul(ops.reciprocal(self), other)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    op: str,
) -> Tensor:
    """Wrap an op output, recording a tape node when any parent is tracked."""
    out = Tensor._wrap(data)
    if _global["debug"] and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._ctx = (op, tuple(parents), backward_fn)
    return out


def _reachable(loss: Tensor) -> list:
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._ctx is None:
            continue
        if t._ctx is _CONSUMED:
            raise GraphError(
                "graph already consumed by a previous backward(); recompute the forward pass"
            )
        nodes.append(t)
        stack.extend(p for p in t._ctx[1] if p.requires_grad)
    nodes.sort(key=lambda t: t.node_id, reverse=True)
    return nodes


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tracked leaf reachable from a scalar loss.

    Leaf gradients accumulate across calls; intermediate gradients are
    discarded. The recorded graph is consumed and cannot be replayed.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: it does not depend on any tracked tensor")
    if loss.is_leaf:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return

    nodes = _reachable(loss)
    pending = {loss.node_id: np.ones_like(loss.data)}
    for node in nodes:
        g = pending.pop(node.node_id, None)
        op, parents, fn = node._ctx
        node._ctx = _CONSUMED
        if g is None:
            continue
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(
                    f"{op} backward produced gradient {pg.shape} for input {parent.data.shape}"
                )
            if pg.dtype != parent.data.dtype:
                pg = pg.astype(parent.data.dtype)
            if parent._ctx is None:
                if parent.grad is None:
                    parent.grad = pg.copy()
                else:
                    parent.grad += pg
            else:
                prev = pending.get(parent.node_id)
                pending[parent.node_id] = pg if prev is None else prev + pg
