"""Adam with bias correction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float,
) -> bool:
    """Update ``params`` in place. Returns False when the step was skipped.

    A ``None`` gradient is treated as zero. Non-finite gradients skip the
    whole step (moments untouched) and emit a warning.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            warnings.warn("adam_step: non-finite gradient, step skipped", RuntimeWarning, stacklevel=2)
            return False
    b1, b2 = state.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        v *= b2
        if g is not None:
            m += (1.0 - b1) * g
            v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return True


class Adam:
    """Adam over a list of tensors, reading their ``grad`` slots."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState(betas=tuple(betas), eps=eps)

    def step(self) -> bool:
        return adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
