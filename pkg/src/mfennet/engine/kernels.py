"""Fused loops for the memory-bound ops.

numpy spends most of its time on temporaries for these; one pass per
element in compiled code is several times faster. Loops run serially in a
fixed order, so results are bitwise reproducible.
"""
from __future__ import annotations

import math

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)


@_jit
def layernorm_forward(x, gamma, beta, eps, out, xhat, rstd):
    """Rows of ``x`` (rows, c) normalised over c; fills out, xhat and rstd."""
    rows, c = x.shape
    for r in range(rows):
        m = 0.0
        for k in range(c):
            m += x[r, k]
        m /= c
        var = 0.0
        for k in range(c):
            d = x[r, k] - m
            var += d * d
        var /= c
        rs = 1.0 / math.sqrt(var + eps)
        rstd[r] = rs
        for k in range(c):
            h = (x[r, k] - m) * rs
            xhat[r, k] = h
            out[r, k] = h * gamma[k] + beta[k]


@_jit
def layernorm_backward(g, xhat, rstd, gamma, gx, ggamma, gbeta, want_x):
    rows, c = g.shape
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for k in range(c):
            gh = g[r, k] * gamma[k]
            s1 += gh
            s2 += gh * xhat[r, k]
            ggamma[k] += g[r, k] * xhat[r, k]
            gbeta[k] += g[r, k]
        if want_x:
            s1 /= c
            s2 /= c
            rs = rstd[r]
            for k in range(c):
                gx[r, k] = rs * (g[r, k] * gamma[k] - s1 - xhat[r, k] * s2)


@_jit
def boxpool_forward(x, k, out):
    """Same-size k x k mean, count-exclude-pad, as x + mean(x_q - x) over the window."""
    n, h, w, c = x.shape
    r = (k - 1) // 2
    acc = np.empty(c, dtype=np.float64)
    for b in range(n):
        for i in range(h):
            i0 = max(i - r, 0)
            i1 = min(i + r, h - 1)
            for j in range(w):
                j0 = max(j - r, 0)
                j1 = min(j + r, w - 1)
                cnt = (i1 - i0 + 1) * (j1 - j0 + 1)
                acc[:] = 0.0
                for p in range(i0, i1 + 1):
                    for q in range(j0, j1 + 1):
                        for ch in range(c):
                            acc[ch] += x[b, p, q, ch] - x[b, i, j, ch]
                for ch in range(c):
                    out[b, i, j, ch] = x[b, i, j, ch] + acc[ch] / cnt


@_jit
def boxpool_backward(g, k, gx):
    """Adjoint of the window mean: each input collects g/count from every window covering it."""
    n, h, w, c = g.shape
    r = (k - 1) // 2
    scaled = np.empty((h, w, c), dtype=g.dtype)
    for b in range(n):
        for i in range(h):
            ci = min(i + r, h - 1) - max(i - r, 0) + 1
            for j in range(w):
                cnt = ci * (min(j + r, w - 1) - max(j - r, 0) + 1)
                for ch in range(c):
                    scaled[i, j, ch] = g[b, i, j, ch] / cnt
        for i in range(h):
            for j in range(w):
                for ch in range(c):
                    gx[b, i, j, ch] = 0.0
                for p in range(max(i - r, 0), min(i + r, h - 1) + 1):
                    for q in range(max(j - r, 0), min(j + r, w - 1) + 1):
                        for ch in range(c):
                            gx[b, i, j, ch] += scaled[p, q, ch]


@_jit
def adam_update(data, grad, m, v, beta1, beta2, step, c2, eps):
    """In-place Adam on flat arrays; ``step`` is lr / (1 - beta1^t), ``c2`` is 1 - beta2^t."""
    for i in range(data.size):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        data[i] -= step * mi / (math.sqrt(vi / c2) + eps)
        grad[i] = 0.0


@_jit
def swish_from_tanh(x, t, out):
    """Given t = tanh(x/2), turn t into sigmoid(x) in place and write x * sigmoid(x)."""
    for i in range(x.size):
        s = 0.5 * t[i] + 0.5
        t[i] = s
        out[i] = x[i] * s


@_jit
def swish_backward(x, s, g, gx):
    for i in range(x.size):
        gx[i] = g[i] * s[i] * (1.0 + x[i] * (1.0 - s[i]))
