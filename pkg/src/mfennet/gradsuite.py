"""Finite-difference suites: one small case per differentiable op, plus the full model.

Setting ``MFEN_CORRUPT_BACKWARD=<op>`` scales that op's analytic gradient by
1.5. It exists so tests can confirm the suite actually catches a broken
backward pass.
"""
from __future__ import annotations

import contextlib
import os
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .engine import ops
from .engine.gradcheck import GradcheckResult, gradcheck
from .engine.tensor import ParamStore, ParamTensor, Tensor, no_grad, precision
from .model import ModelConfig, build_mfennet, metaformer_block, spp

TOLERANCE = 1e-4
CORRUPT_ENV = "MFEN_CORRUPT_BACKWARD"


@dataclass
class SuiteEntry:
    name: str
    result: GradcheckResult
    seconds: float

    @property
    def passed(self) -> bool:
        return self.result.max_rel_error < TOLERANCE

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        w = self.result.worst
        where = f" at {w.name}{list(w.index)}" if w is not None and not self.passed else ""
        return f"{self.name:<22} max_rel_err={self.result.max_rel_error:.3e} {status}{where} ({self.seconds:.1f}s)"


def _scaled(fn: Callable) -> Callable:
    def wrapped(*args, **kwargs):
        out = fn(*args, **kwargs)
        inner = out._backward_fn
        if inner is not None:
            out._backward_fn = lambda g: tuple(None if v is None else v * 1.5 for v in inner(g))
        return out

    return wrapped


@contextlib.contextmanager
def corrupted(op_name: Optional[str]):
    """Temporarily replace ``ops.<op_name>`` with a version whose gradient is wrong."""
    if not op_name:
        yield
        return
    if not hasattr(ops, op_name):
        raise ValueError(f"unknown op {op_name!r} for {CORRUPT_ENV}")
    original = getattr(ops, op_name)
    setattr(ops, op_name, _scaled(original))
    try:
        yield
    finally:
        setattr(ops, op_name, original)


def _p(rng, name, *shape) -> ParamTensor:
    return ParamTensor(name, rng.standard_normal(shape))


def _target(shape, rng) -> Tensor:
    return Tensor(rng.uniform(0.0, 1.0, size=shape))


def _loss(out: Tensor, target: Tensor) -> Tensor:
    # BCE against a soft target: every output element gets a distinct weight
    return ops.bce_with_logits(out, target)


def op_cases(size: int = 8, seed: int = 0) -> dict:
    """name -> (closure producing a scalar loss, tensors to probe). Spatial dims <= 8."""
    s = max(4, min(8, size - size % 2))
    rng = np.random.default_rng(seed)
    cases = {}

    def case(name, fn, params):
        cases[name] = (fn, params)

    x = _p(rng, "x", 2, 3, s, s)
    w = _p(rng, "weight", 4, 3, 3, 3)
    b = _p(rng, "bias", 4)
    t = _target((2, 4, s, s), rng)
    case("conv2d", lambda: _loss(ops.conv2d(x, w, b, padding=1), t), [x, w, b])

    ts = _target((2, 4, s // 2, s // 2), rng)
    case("conv2d_stride2", lambda: _loss(ops.conv2d(x, w, b, stride=2, padding=1), ts), [x, w, b])

    w2 = _p(rng, "weight", 4, 3, 2, 2)
    case("conv2d_asym_pad", lambda: _loss(ops.conv2d(x, w2, b, padding=(0, 1, 0, 1)), t), [x, w2, b])

    w1 = _p(rng, "weight", 4, 3, 1, 1)
    case("conv2d_1x1", lambda: _loss(ops.conv2d(x, w1, b), t), [x, w1, b])

    # distinct values keep the max away from ties, where the derivative is undefined
    xm = ParamTensor("x", rng.permutation(2 * 3 * s * s).reshape(2, 3, s, s) / 10.0)
    t3 = _target((2, 3, s // 2, s // 2), rng)
    case("maxpool2d", lambda: _loss(ops.maxpool2d(xm), t3), [xm])

    tx = _target((2, 3, s, s), rng)
    case("avgpool2d_samesize", lambda: _loss(ops.avgpool2d_samesize(x, 3), tx), [x])

    ta = _target((2, 3, 3, 3), rng)
    case("adaptive_avgpool2d", lambda: _loss(ops.adaptive_avgpool2d(x, 3), ta), [x])

    tu = _target((2, 3, 2 * s, 2 * s), rng)
    case("upsample_nearest2x", lambda: _loss(ops.upsample_nearest2x(x), tu), [x])

    xs = _p(rng, "x", 2, 3, 3, 3)
    case("upsample_nearest_to", lambda: _loss(ops.upsample_nearest_to(xs, s, s), tx), [xs])

    gamma = ParamTensor("gamma", 1.0 + 0.1 * rng.standard_normal(3))
    beta = _p(rng, "beta", 3)
    case("channel_layernorm", lambda: _loss(ops.channel_layernorm(x, gamma, beta), tx), [x, gamma, beta])

    case("swish", lambda: _loss(ops.swish(x), tx), [x])
    # keep inputs away from the kink at zero
    xr = ParamTensor("x", np.sign(rng.standard_normal((2, 3, s, s))) * rng.uniform(0.1, 1.0, (2, 3, s, s)))
    case("relu", lambda: _loss(ops.relu(xr), tx), [xr])

    y = _p(rng, "y", 2, 3, s, s)
    case("add", lambda: _loss(ops.add(x, y), tx), [x, y])
    case("sub", lambda: _loss(ops.sub(x, y), tx), [x, y])

    z = _p(rng, "z", 2, 2, s, s)
    tc = _target((2, 5, s, s), rng)
    case("concat_channels", lambda: _loss(ops.concat_channels(x, z), tc), [x, z])

    case("bce_with_logits", lambda: ops.bce_with_logits(x, tx), [x])

    store = ParamStore()
    c, r = 4, 2
    store.add("blk.norm1.gamma", 1.0 + 0.1 * rng.standard_normal(c))
    store.add("blk.norm1.beta", 0.1 * rng.standard_normal(c))
    store.add("blk.norm2.gamma", 1.0 + 0.1 * rng.standard_normal(c))
    store.add("blk.norm2.beta", 0.1 * rng.standard_normal(c))
    store.add("blk.fc1.weight", 0.5 * rng.standard_normal((r * c, c, 1, 1)))
    store.add("blk.fc1.bias", 0.1 * rng.standard_normal(r * c))
    store.add("blk.fc2.weight", 0.5 * rng.standard_normal((c, r * c, 1, 1)))
    store.add("blk.fc2.bias", 0.1 * rng.standard_normal(c))
    xb = _p(rng, "x", 2, c, s, s)
    tb = _target((2, c, s, s), rng)
    case("metaformer_block", lambda: _loss(metaformer_block(xb, store, "blk"), tb), [xb, *store])

    sstore = ParamStore()
    bins = (1, 2)
    for i in range(len(bins)):
        sstore.add(f"spp.branch{i}.proj.weight", 0.5 * rng.standard_normal((c // 2, c, 1, 1)))
        sstore.add(f"spp.branch{i}.proj.bias", 0.1 * rng.standard_normal(c // 2))
    sstore.add("spp.fuse.weight", 0.3 * rng.standard_normal((c, 2 * c, 3, 3)))
    sstore.add("spp.fuse.bias", 0.1 * rng.standard_normal(c))
    xp = _p(rng, "x", 2, c, 4, 4)
    tp = _target((2, c, 4, 4), rng)
    case("spp", lambda: _loss(spp(xp, bins, sstore), tp), [xp, *sstore])
    return cases


def condition(model, x: Tensor, target_std: float = 1.0) -> None:
    """Rescale each conv so its output has unit spread on ``x``.

    At the default init the signal shrinks by roughly 3x per conv + Swish,
    so deep parameters end up with gradients near 1e-10. Central differences
    with h=1e-5 cannot resolve those against float64 round-off in the loss.
    Checking at a point where every layer carries signal tests the same
    backward code with meaningful probes.
    """
    with no_grad():
        for node in model.nodes:
            if node.op != "conv":
                continue
            std = float(model.run(x, keep=[node.name])[node.name].numpy().std())
            if std > 0:
                model.store[node.params[0]].data *= target_std / std


def model_case(size: int = 16, seed: int = 0, config: Optional[ModelConfig] = None):
    """Full MFEnNet on a 1x3xSxS input; S is rounded up to a multiple of 16."""
    size = max(16, -(-size // 16) * 16)
    config = (config or ModelConfig()).for_input(size)
    model = build_mfennet(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, config.in_channels, size, size)))
    target = Tensor((rng.uniform(size=(1, config.out_channels, size, size)) > 0.5).astype(np.float64))
    condition(model, x)
    return (lambda: ops.bce_with_logits(model.forward(x), target)), list(model.store), size


def run_suite(
    size: int = 16,
    include_model: bool = True,
    probe_count: int = 6,
    model_probe_count: int = 3,
    seed: int = 0,
    corrupt: Optional[str] = None,
    report: Optional[Callable[[SuiteEntry], None]] = None,
) -> list:
    """Run every op case and (optionally) the full model in 64-bit mode."""
    if corrupt is None:
        corrupt = os.environ.get(CORRUPT_ENV) or None
    entries = []
    with precision(64), corrupted(corrupt):
        for name, (fn, params) in op_cases(size, seed).items():
            t0 = time.perf_counter()
            res = gradcheck(fn, params, probe_count=probe_count, seed=seed)
            entries.append(SuiteEntry(name, res, time.perf_counter() - t0))
            if report:
                report(entries[-1])
        if include_model:
            t0 = time.perf_counter()
            fn, params, s = model_case(size, seed)
            res = gradcheck(fn, params, probe_count=model_probe_count, seed=seed)
            entries.append(SuiteEntry(f"mfennet_{s}x{s}", res, time.perf_counter() - t0))
            if report:
                report(entries[-1])
    return entries
