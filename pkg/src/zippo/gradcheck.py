"""Central finite-difference checks for the autodiff engine.

Checks run in float64: with a 1e-3 step, float32 round-off alone would
swamp a 1e-3 relative tolerance on small gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class Probe:
    tensor: int
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric), 1e-6)
        return abs(self.analytic - self.numeric) / scale


@dataclass
class GradCheckResult:
    probes: list[Probe]

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor], probes: int = 20,
                    step: float = 1e-3, seed: int = 0) -> GradCheckResult:
    """Compare analytic and central-difference gradients at random entries.

    ``loss_fn`` rebuilds the graph from the current values of ``tensors`` and
    returns a scalar. Probes are spread round-robin over the tensors.
    """
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    grads = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    out = []
    for k in range(probes):
        ti = k % len(tensors)
        t = tensors[ti]
        idx = tuple(int(rng.integers(0, s)) for s in t.shape)
        old = t.data[idx]
        t.data[idx] = old + step
        hi = loss_fn().item()
        t.data[idx] = old - step
        lo = loss_fn().item()
        t.data[idx] = old
        out.append(Probe(ti, idx, float(grads[ti][idx]), (hi - lo) / (2.0 * step)))
    return GradCheckResult(out)
