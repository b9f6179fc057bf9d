"""Tensor type, parameter storage and the reverse-mode tape.

Activations are rank-4 arrays with the logical layout ``(n, c, h, w)``.
Ops in :mod:`mfennet.engine.ops` produce arrays that are physically
channels-last (a transposed view of an ``(n, h, w, c)`` buffer) so the
convolution GEMMs run with the pixel axis as the long dimension. Use
:meth:`Tensor.numpy` when a row-major ``(n, c, h, w)`` copy is needed.
"""
from __future__ import annotations

import os
from collections import OrderedDict
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG = os.environ.get("MFEN_DEBUG", "") not in ("", "0")


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Select the global float width: 32 for training, 64 for gradient checks."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextmanager
def precision(bits: int):
    prev = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = prev


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A value node on the autodiff tape.

    ``backward_fn`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` where a parent needs no gradient).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return np.ascontiguousarray(self.data)

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap an op output, recording it on the tape when any parent needs grad."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by forward op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root: Tensor, grad: Optional[np.ndarray] = None) -> None:
    """Propagate gradients from ``root`` to every leaf that requires them.

    Leaves accumulate into ``.grad``; intermediate gradients are dropped as
    soon as they have been consumed.
    """
    if not root.requires_grad:
        raise RuntimeError("backward() called on a tensor that does not require grad")
    if grad is None:
        if root.data.size != 1:
            raise RuntimeError("implicit backward seed needs a scalar output")
        grad = np.ones_like(root.data)
    pending = {id(root): grad}
    for node in _topo_order(root):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=node.data.dtype, copy=True)
            else:
                node.grad += g
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg


class ParamTensor(Tensor):
    """A learnable leaf with its gradient and Adam moment buffers."""

    __slots__ = ("m", "v")

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(np.array(value, dtype=get_dtype()), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad.fill(0)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)


class ParamStore:
    """Ordered, name-addressed collection of :class:`ParamTensor`."""

    def __init__(self):
        self._params: "OrderedDict[str, ParamTensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> ParamTensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = ParamTensor(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[ParamTensor]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def astype(self, dtype) -> None:
        for p in self:
            p.astype(dtype)

    def manifest(self) -> str:
        """``name<TAB>d0xd1x...`` per parameter, one per line, in store order."""
        lines = [f"{p.name}\t{'x'.join(str(d) for d in p.data.shape)}" for p in self]
        return "\n".join(lines) + ("\n" if lines else "")

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((p.name, p.data.copy()) for p in self)
