from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .tensor import ParamStore


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One bias-corrected Adam update, in place; gradients are zeroed afterwards."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    step = state.lr / c1
    for p in params:
        flat = [a.reshape(-1) for a in (p.data, p.grad, p.m, p.v)]
        if any(not np.shares_memory(f, a) for f, a in zip(flat, (p.data, p.grad, p.m, p.v))):
            raise RuntimeError(f"parameter {p.name!r} has non-contiguous state")
        kernels.adam_update(flat[0], flat[1], flat[2], flat[3], b1, b2, step, c2, state.eps)
