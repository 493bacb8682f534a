from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .tensor import Tensor


class MissingGradientError(RuntimeError):
    """An optimizer step found a parameter that never received a gradient."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


class Adam:
    """Bias-corrected Adam. Gradients are zeroed after every step."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("a parameter was registered with the optimizer more than once")
        self.state = AdamState(
            lr=lr,
            beta1=betas[0],
            beta2=betas[1],
            eps=eps,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad.fill(0)

    def step(self) -> None:
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise MissingGradientError(f"no gradient for parameters: {', '.join(missing[:5])}")
        s = self.state
        s.t += 1
        c1 = 1.0 - s.beta1**s.t
        c2 = 1.0 - s.beta2**s.t
        for p, m, v in zip(self.params, s.m, s.v):
            g = p.grad
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.data -= (s.lr * m_hat / (np.sqrt(v_hat) + s.eps)).astype(p.data.dtype, copy=False)
            g.fill(0)

    def state_dict(self) -> Dict:
        s = self.state
        return {
            "lr": s.lr,
            "beta1": s.beta1,
            "beta2": s.beta2,
            "eps": s.eps,
            "t": s.t,
            "m": [m.copy() for m in s.m],
            "v": [v.copy() for v in s.v],
        }

    def load_state_dict(self, state: Dict) -> None:
        if len(state["m"]) != len(self.params) or len(state["v"]) != len(self.params):
            raise ValueError("optimizer state does not match the parameter list")
        for p, m, v in zip(self.params, state["m"], state["v"]):
            if m.shape != p.shape or v.shape != p.shape:
                raise ValueError(f"moment shape {m.shape} does not match parameter {p.shape}")
        self.state = AdamState(
            lr=float(state["lr"]),
            beta1=float(state["beta1"]),
            beta2=float(state["beta2"]),
            eps=float(state["eps"]),
            t=int(state["t"]),
            m=[np.array(m, dtype=p.data.dtype) for p, m in zip(self.params, state["m"])],
            v=[np.array(v, dtype=p.data.dtype) for p, v in zip(self.params, state["v"])],
        )
