"""Parameter containers and the small layer set the networks are built from."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..autodiff import Tensor, get_dtype, ops


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Registers Parameters and child Modules assigned as attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        seen = set()
        for name, p in self._walk(prefix):
            if id(p) in seen:
                raise ValueError(f"parameter {name} is registered twice")
            seen.add(id(p))
            yield name, p

    def _walk(self, prefix: str):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m._walk(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.data.dtype, copy=True)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def frozen(self) -> bool:
        return all(not p.requires_grad for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for m in self._modules.values():
            m.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __getitem__(self, i):
        return self._items[i]

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = np.sqrt(2.0)) -> np.ndarray:
    """Fan-in scaled normal init; the default gain suits a following ReLU."""
    return (rng.standard_normal(shape) * (gain / np.sqrt(fan_in))).astype(get_dtype())


RELU_GAIN = float(np.sqrt(2.0))
LINEAR_GAIN = 1.0
# projections back to image space start close to an identity mapping
OUTPUT_GAIN = 0.1


class Conv2d(Module):
    def __init__(
        self,
        rng: np.random.Generator,
        cin: int,
        cout: int,
        k: int = 3,
        stride: int = 1,
        pad: Optional[int] = None,
        bias: bool = True,
        init_std: Optional[float] = None,
        gain: float = RELU_GAIN,
    ):
        super().__init__()
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        shape = (cout, cin, k, k)
        if init_std is None:
            self.weight = Parameter(kaiming_normal(rng, shape, cin * k * k, gain))
        else:
            self.weight = Parameter((rng.standard_normal(shape) * init_std).astype(get_dtype()))
        if bias:
            self.bias = Parameter(np.zeros(cout, dtype=get_dtype()))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    """Stride-2, kernel-2 up-sampling; doubles both spatial extents."""

    def __init__(
        self, rng: np.random.Generator, cin: int, cout: int, k: int = 2, stride: int = 2, gain: float = LINEAR_GAIN
    ):
        super().__init__()
        self.stride = stride
        # each output pixel sees cin * (k / stride)^2 taps
        fan_in = max(1, cin * (k * k) // (stride * stride))
        self.weight = Parameter(kaiming_normal(rng, (cin, cout, k, k), fan_in, gain))
        self.bias = Parameter(np.zeros(cout, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, fin: int, fout: int):
        super().__init__()
        self.weight = Parameter(kaiming_normal(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.weight = Parameter(np.ones(channels, dtype=get_dtype()))
        self.bias = Parameter(np.zeros(channels, dtype=get_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias)
