"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import ParamStore, Tensor, get_dtype


class GradcheckError(RuntimeError):
    pass


@dataclass
class Probe:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: Optional[Probe]
    probes: list = field(default_factory=list)

    def __float__(self) -> float:
        return self.max_rel_error


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _leaves(params) -> list:
    if isinstance(params, ParamStore):
        return list(params)
    return list(params)


def gradcheck(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    probe_count: int = 8,
    h: float = 1e-5,
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``probe_count`` entries are drawn per tensor (all entries when the tensor is
    smaller). Requires 64-bit mode.
    """
    if get_dtype() != np.float64:
        raise GradcheckError("gradcheck requires 64-bit mode (set_precision(64))")
    leaves = _leaves(params)
    for p in leaves:
        if not p.requires_grad:
            raise GradcheckError(f"tensor {p.name or p!r} does not require grad")
        p.data = np.ascontiguousarray(p.data)
        p.grad = np.zeros_like(p.data)

    loss = f()
    if not np.isfinite(loss.data).all():
        raise GradcheckError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = {id(p): p.grad.copy() for p in leaves}

    rng = np.random.default_rng(seed)
    probes = []
    for p in leaves:
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= probe_count else np.sort(rng.choice(n, size=probe_count, replace=False))
        for k in picks:
            k = int(k)
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradcheckError(f"non-finite loss while probing {p.name or 'tensor'}[{k}]")
            num = (fp - fm) / (2 * h)
            ana = float(analytic[id(p)].reshape(-1)[k])
            idx = np.unravel_index(k, p.data.shape)
            probes.append(Probe(p.name, tuple(int(i) for i in idx), ana, num, rel_error(ana, num)))
    for p in leaves:
        p.grad = np.zeros_like(p.data)
    worst = max(probes, key=lambda pr: pr.rel_error) if probes else None
    return GradcheckResult(worst.rel_error if worst else 0.0, worst, probes)
