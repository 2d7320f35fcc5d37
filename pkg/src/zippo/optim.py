"""Adam optimizer over :class:`~zippo.tensor.Parameter` lists."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Parameter


class MissingGradientError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction.

    ``step_count`` only ever increases. Moments are not checkpointed, so a
    resumed run starts from fresh moments.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise MissingGradientError(f"{len(missing)} parameter(s) have no gradient; call backward() first")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)


def adam_step(params: Sequence[Parameter], state: Adam, lr: float) -> None:
    """Functional spelling of ``state.step(lr)`` for a prebuilt optimizer."""
    if list(params) != state.params:
        raise ValueError("optimizer state was built for a different parameter list")
    state.step(lr)
