"""Central-difference verification of analytic gradients.

The analytic side runs at the requested precision; the numeric side always
runs in float64 so that f32 checks measure the analytic error rather than
finite-difference noise. Probe points where the one-sided differences
disagree are treated as kinks (non-differentiable samples) and excluded.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from . import ops
from .tensor import NonFiniteError, Tensor, no_grad, precision

_DTYPE_FOR = {"f32": np.float32, "f64": np.float64}


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_probed: int
    n_excluded: int
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.n_probed > 0 and self.max_rel_err < self.tol

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (
            f"{verdict}: max rel err {self.max_rel_err:.3e} (tol {self.tol:.0e}), "
            f"{self.n_probed} probes, {self.n_excluded} kinks excluded"
        )


def _outputs(result) -> list:
    if isinstance(result, Tensor):
        return [result]
    return [r for r in result if isinstance(r, Tensor)]


def grad_check(
    fn: Callable[[], object],
    inputs: Sequence[Tensor],
    tol: float = 1e-3,
    mode: str = "f32",
    eps: float = 1e-4,
    max_probes: int = 12,
    seed: int = 0,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare backward() gradients of ``fn`` w.r.t. ``inputs`` against central differences.

    ``fn`` takes no arguments and reads the input tensors through closure; it
    may return a tensor of any shape (contracted with a fixed random
    projection) or a tuple of tensors.
    """
    # offset stream so projections never coincide with a caller's default_rng(seed) inputs
    rng = np.random.default_rng([seed, 0x5EED])
    dtype = _DTYPE_FOR[mode]
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    projections: dict = {}

    def project(result, as_tensor: bool):
        total = None
        for i, out in enumerate(_outputs(result)):
            if i not in projections:
                projections[i] = rng.standard_normal(out.shape) if out.size > 1 else np.ones(out.shape)
            r = projections[i]
            if as_tensor:
                term = ops.sum(ops.mul(out, r.astype(out.dtype)))
            else:
                term = float((out.data.astype(np.float64) * r).sum())
            total = term if total is None else total + term
        return total

    try:
        # analytic pass
        for t, (data, _, _) in zip(inputs, saved):
            t.data = data.astype(dtype)
            t.requires_grad = True
            t.grad = None
        with precision(mode):
            loss = project(fn(), as_tensor=True)
        loss.backward()
        analytic = []
        for t in inputs:
            g = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("analytic gradient contains non-finite values")
            analytic.append(g)

        # numeric pass
        for t, (data, _, _) in zip(inputs, saved):
            t.data = data.astype(np.float64)
            t.grad = None

        def evaluate() -> float:
            with precision("f64"), no_grad():
                value = project(fn(), as_tensor=False)
            if not np.isfinite(value):
                raise NonFiniteError("function value became non-finite during probing")
            return value

        per_input, n_probed, n_excluded = [], 0, 0
        for t, g in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            count = flat.size
            idx = np.arange(count) if count <= max_probes else rng.choice(count, max_probes, replace=False)
            central, coarse, fine, one_sided = [], [], [], []
            for i in idx:
                orig = flat[i]
                f0 = evaluate()
                fp = []
                for h in (eps, eps / 2):
                    flat[i] = orig + h
                    up = evaluate()
                    flat[i] = orig - h
                    down = evaluate()
                    fp.append((up - down) / (2 * h))
                    if h == eps:
                        one_sided.append(((up - f0) / h, (f0 - down) / h))
                flat[i] = orig
                d1, d2 = fp
                coarse.append(d1)
                fine.append(d2)
                # Richardson extrapolation cancels the O(h^2) truncation term
                central.append((4.0 * d2 - d1) / 3.0)
            central = np.array(central)
            ana = g.reshape(-1)[idx]
            scale = max(np.abs(central).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-12)
            worst = 0.0
            for k in range(len(idx)):
                # a kink within the step makes the two step sizes, or the two one-sided
                # slopes, disagree at first order
                fwd, bwd = one_sided[k]
                if (abs(coarse[k] - fine[k]) > kink_tol * max(abs(coarse[k]), abs(fine[k]), scale)
                        or abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd), scale)):
                    n_excluded += 1
                    continue
                denom = max(abs(ana[k]), abs(central[k]), 1e-2 * scale)
                worst = max(worst, abs(ana[k] - central[k]) / denom)
                n_probed += 1
            per_input.append(worst)
        return GradCheckReport(
            max_rel_err=max(per_input, default=0.0),
            tol=tol,
            n_probed=n_probed,
            n_excluded=n_excluded,
            per_input=per_input,
        )
    finally:
        for t, (data, req, grad) in zip(inputs, saved):
            t.data = data
            t.requires_grad = req
            t.grad = grad
