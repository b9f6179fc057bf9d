"""Differentiable primitives over rank-4 tensors.

Every op takes and returns :class:`Tensor` objects with logical shape
``(n, c, h, w)``. Internally the arrays are handled channels-last; results
are returned as ``(n, c, h, w)`` views of contiguous ``(n, h, w, c)``
buffers.
"""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import expit

from . import kernels
from .tensor import Tensor, get_dtype, make_result


class ShapeError(ValueError):
    pass


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_dtype()))


def from_nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def to_nhwc(a: np.ndarray) -> np.ndarray:
    """Channels-last view; zero-copy when ``a`` came out of an op."""
    return np.ascontiguousarray(a.transpose(0, 2, 3, 1))


def _check4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op}: expected a rank-4 (n, c, h, w) tensor, got shape {x.shape}")


def _pad_spec(padding) -> tuple:
    if isinstance(padding, (int, np.integer)):
        p = int(padding)
        return (p, p, p, p)
    top, bottom, left, right = (int(v) for v in padding)
    return (top, bottom, left, right)


# ---------------------------------------------------------------------------
# convolution


def _conv2d_im2col(x, weight, bias, xs, taps, pads):
    """Stride-1 conv as one GEMM over gathered patches.

    Used on small feature maps, where the shifted-row form would spend most
    of its work on padding rows.
    """
    kh, kw, cin, cout = taps.shape
    top, bottom, left, right = pads
    n, h, w, _ = xs.shape
    ho, wo = h + top + bottom - kh + 1, w + left + right - kw + 1
    xp = np.pad(xs, ((0, 0), (top, bottom), (left, right), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=xs.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + ho, j:j + wo, :]
    cols = cols.reshape(n * ho * wo, kh * kw * cin)
    wmat = taps.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        g_ = to_nhwc(g).reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (cols.T @ g_).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g_.sum(axis=0)
        if x.requires_grad:
            gcols = (g_ @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape, dtype=g_.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            gx = from_nhwc(np.ascontiguousarray(gxp[:, top:top + h, left:left + w, :]))
        return gx, gw, gb

    return make_result(from_nhwc(out), (x, weight) if bias is None else (x, weight, bias), backward_fn)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: Union[int, Sequence[int]] = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``padding`` is either an int applied to all four sides or a
    ``(top, bottom, left, right)`` tuple. ``weight`` has shape
    ``(cout, cin, kh, kw)``.

    The padded input is flattened to ``(n*hp*wp, cin)`` rows; tap ``(i, j)``
    is then a contiguous row slice at offset ``i*wp + j``, so the convolution
    is a sum of ``kh*kw`` GEMMs without an im2col copy. Rows that wrap
    across an image edge land outside the valid output window and are
    discarded. Strides subsample the stride-1 result.
    """
    _check4(x, "conv2d")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d: weight must be rank 4, got shape {weight.shape}")
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(
            f"conv2d: input shape {x.shape} has {c} channels but weight shape "
            f"{weight.shape} expects {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match weight shape {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    top, bottom, left, right = _pad_spec(padding)
    if min(top, bottom, left, right) < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    hp, wp = h + top + bottom, w + left + right
    if hp < kh or wp < kw:
        raise ShapeError(
            f"conv2d: input shape {x.shape} with padding {padding} is too small for weight shape {weight.shape}"
        )
    ho1, wo1 = hp - kh + 1, wp - kw + 1
    ho, wo = (ho1 - 1) // stride + 1, (wo1 - 1) // stride + 1

    xs = to_nhwc(x.data)
    dtype = xs.dtype
    taps = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # (kh, kw, cin, cout)
    pointwise = kh == 1 and kw == 1 and (top, bottom, left, right) == (0, 0, 0, 0)
    rows = n * hp * wp
    extra = (kh - 1) * wp + (kw - 1)

    if not pointwise and stride == 1 and hp * wp > 1.5 * h * w:
        return _conv2d_im2col(x, weight, bias, xs, taps, (top, bottom, left, right))

    if pointwise:
        xflat = xs.reshape(rows, cin)
        acc = xflat @ taps[0, 0]
    else:
        xflat = np.zeros((rows + extra, cin), dtype=dtype)
        xflat[:rows].reshape(n, hp, wp, cin)[:, top:top + h, left:left + w, :] = xs
        acc = xflat[0:rows] @ taps[0, 0]
        tmp = np.empty_like(acc)
        for i in range(kh):
            for j in range(kw):
                if i == 0 and j == 0:
                    continue
                o = i * wp + j
                np.matmul(xflat[o:o + rows], taps[i, j], out=tmp)
                acc += tmp
    full = acc.reshape(n, hp, wp, cout)
    if (ho, wo) == (hp, wp) and stride == 1:
        out = full
    else:
        out = np.ascontiguousarray(full[:, :ho1:stride, :wo1:stride, :])
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        g_ = to_nhwc(g)
        if out is full:
            gflat = g_.reshape(rows, cout)
        else:
            gfull = np.zeros((n, hp, wp, cout), dtype=g_.dtype)
            gfull[:, :ho1:stride, :wo1:stride, :] = g_
            gflat = gfull.reshape(rows, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            gtaps = np.empty((kh, kw, cin, cout), dtype=g_.dtype)
            for i in range(kh):
                for j in range(kw):
                    o = i * wp + j
                    np.matmul(xflat[o:o + rows].T, gflat, out=gtaps[i, j])
            gw = gtaps.transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g_.sum(axis=(0, 1, 2))
        if x.requires_grad:
            if pointwise:
                gx = from_nhwc((gflat @ taps[0, 0].T).reshape(n, h, w, cin))
            else:
                gxflat = np.zeros((rows + extra, cin), dtype=g_.dtype)
                tmp_g = np.empty((rows, cin), dtype=g_.dtype)
                for i in range(kh):
                    for j in range(kw):
                        o = i * wp + j
                        np.matmul(gflat, taps[i, j].T, out=tmp_g)
                        gxflat[o:o + rows] += tmp_g
                gpad = gxflat[:rows].reshape(n, hp, wp, cin)
                gx = from_nhwc(np.ascontiguousarray(gpad[:, top:top + h, left:left + w, :]))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(from_nhwc(out), parents, backward_fn)


# ---------------------------------------------------------------------------
# pooling and resampling


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Max pooling without padding; ties resolve to the first tap in row-major order."""
    _check4(x, "maxpool2d")
    n, c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: spatial dims of {x.shape} must be divisible by stride {stride}")
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input {x.shape}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    xs = to_nhwc(x.data)
    win = np.empty((n, ho, wo, k * k, c), dtype=xs.dtype)
    for i in range(k):
        for j in range(k):
            win[:, :, :, i * k + j, :] = xs[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def backward_fn(g):
        g_ = to_nhwc(g)
        gx = np.zeros((n, h, w, c), dtype=g_.dtype)
        for t in range(k * k):
            i, j = divmod(t, k)
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(arg == t, g_, 0)
        return (from_nhwc(gx),)

    return make_result(from_nhwc(out), (x,), backward_fn)


def avgpool2d_samesize(x: Tensor, k: int = 3) -> Tensor:
    """Stride-1 average pooling, zero padding (k-1)/2, divisor excludes padding.

    Computed as ``x + mean(x_q - x)`` over the window so constant inputs map
    to themselves bit-for-bit.
    """
    _check4(x, "avgpool2d_samesize")
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"avgpool2d_samesize: kernel must be odd and positive, got {k}")
    xs = to_nhwc(x.data)
    out = np.empty_like(xs)
    kernels.boxpool_forward(xs, k, out)

    def backward_fn(g):
        gx = np.empty(xs.shape, dtype=g.dtype)
        # window sums are symmetric, so the adjoint is the same box sum
        kernels.boxpool_backward(to_nhwc(g), k, gx)
        return (from_nhwc(gx),)

    return make_result(from_nhwc(out), (x,), backward_fn)


def adaptive_bounds(size: int, bins: int) -> list:
    """Floor/ceil region partition used by adaptive pooling."""
    return [((i * size) // bins, -((-(i + 1) * size) // bins)) for i in range(bins)]


def adaptive_avgpool2d(x: Tensor, bins: int) -> Tensor:
    """Average-pool to ``bins x bins`` with floor/ceil region boundaries."""
    _check4(x, "adaptive_avgpool2d")
    n, c, h, w = x.shape
    if bins < 1 or bins > h or bins > w:
        raise ShapeError(f"adaptive_avgpool2d: {bins} bins do not fit input {x.shape}")
    xs = to_nhwc(x.data)
    rb, cb = adaptive_bounds(h, bins), adaptive_bounds(w, bins)
    out = np.empty((n, bins, bins, c), dtype=xs.dtype)
    for i, (r0, r1) in enumerate(rb):
        for j, (c0, c1) in enumerate(cb):
            region = xs[:, r0:r1, c0:c1, :]
            ref = region[:, :1, :1, :]
            dev = (region - ref).sum(axis=(1, 2), keepdims=True) / ((r1 - r0) * (c1 - c0))
            out[:, i:i + 1, j:j + 1, :] = ref + dev

    def backward_fn(g):
        g_ = to_nhwc(g)
        gx = np.zeros((n, h, w, c), dtype=g_.dtype)
        for i, (r0, r1) in enumerate(rb):
            for j, (c0, c1) in enumerate(cb):
                gx[:, r0:r1, c0:c1, :] += g_[:, i:i + 1, j:j + 1, :] / ((r1 - r0) * (c1 - c0))
        return (from_nhwc(gx),)

    return make_result(from_nhwc(out), (x,), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check4(x, "upsample_nearest2x")
    n, c, h, w = x.shape
    xs = to_nhwc(x.data)
    out = np.broadcast_to(xs[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def backward_fn(g):
        gx = to_nhwc(g).reshape(n, h, 2, w, 2, c).sum(axis=(2, 4))
        return (from_nhwc(gx),)

    return make_result(from_nhwc(out), (x,), backward_fn)


def upsample_nearest_to(x: Tensor, height: int, width: int) -> Tensor:
    """Nearest-neighbour resize to an arbitrary size (source index floor(i*h/H))."""
    _check4(x, "upsample_nearest_to")
    n, c, h, w = x.shape
    ri = (np.arange(height) * h) // height
    ci = (np.arange(width) * w) // width
    xs = to_nhwc(x.data)
    out = np.ascontiguousarray(xs[:, ri][:, :, ci])

    def backward_fn(g):
        g_ = to_nhwc(g)
        tmp = np.zeros((n, h, width, c), dtype=g_.dtype)
        np.add.at(tmp, (slice(None), ri), g_)
        gx = np.zeros((n, h, w, c), dtype=g_.dtype)
        np.add.at(gx, (slice(None), slice(None), ci), tmp)
        return (from_nhwc(gx),)

    return make_result(from_nhwc(out), (x,), backward_fn)


# ---------------------------------------------------------------------------
# normalisation and pointwise ops


def channel_layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm across channels at each (n, h, w) position, then per-channel affine."""
    _check4(x, "channel_layernorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"channel_layernorm: gamma {gamma.shape} / beta {beta.shape} must have length {c} for input {x.shape}"
        )
    xs = to_nhwc(x.data)
    rows = xs.reshape(-1, c)
    out = np.empty_like(xs)
    xhat = np.empty_like(xs)
    rstd = np.empty(rows.shape[0], dtype=xs.dtype)
    gam = gamma.data.astype(xs.dtype, copy=False)
    kernels.layernorm_forward(rows, gam, beta.data.astype(xs.dtype, copy=False), eps,
                              out.reshape(-1, c), xhat.reshape(-1, c), rstd)

    def backward_fn(g):
        g_ = to_nhwc(g)
        gx = np.empty(xs.shape, dtype=g_.dtype)
        gg = np.zeros(c)
        gb = np.zeros(c)
        kernels.layernorm_backward(g_.reshape(-1, c), xhat.reshape(-1, c), rstd, gam,
                                   gx.reshape(-1, c), gg, gb, x.requires_grad)
        return (
            from_nhwc(gx) if x.requires_grad else None,
            gg.astype(g_.dtype) if gamma.requires_grad else None,
            gb.astype(g_.dtype) if beta.requires_grad else None,
        )

    return make_result(from_nhwc(out), (x, gamma, beta), backward_fn)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xs = x.data if x.data.ndim != 4 else to_nhwc(x.data)
    flat = xs.reshape(-1)
    out = np.empty_like(xs)
    if xs.dtype == np.float32:
        # sigmoid via tanh: vectorised in float32 and overflow-free
        s = np.multiply(flat, np.float32(0.5))
        np.tanh(s, out=s)
        kernels.swish_from_tanh(flat, s, out.reshape(-1))
    else:
        s = expit(flat)
        np.multiply(flat, s, out=out.reshape(-1))

    def backward_fn(g):
        g_ = g if g.ndim != 4 else to_nhwc(g)
        gx = np.empty_like(xs)
        kernels.swish_backward(flat, s, g_.reshape(-1), gx.reshape(-1))
        return (gx if gx.ndim != 4 else from_nhwc(gx),)

    return make_result(out if out.ndim != 4 else from_nhwc(out), (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def backward_fn(g):
        return (np.where(mask, g, 0).astype(g.dtype, copy=False),)

    return make_result(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along channels, ``a`` first."""
    _check4(a, "concat_channels")
    _check4(b, "concat_channels")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels: shapes {a.shape} and {b.shape} disagree on n/h/w")
    out = np.concatenate([to_nhwc(a.data), to_nhwc(b.data)], axis=-1)

    def backward_fn(g):
        g_ = to_nhwc(g)
        return (
            from_nhwc(np.ascontiguousarray(g_[..., :ca])),
            from_nhwc(np.ascontiguousarray(g_[..., ca:])),
        )

    return make_result(from_nhwc(out), (a, b), backward_fn)


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs target {t.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce_with_logits: target values must lie in [0, 1]")
    x = logits.data
    t = t.astype(x.dtype, copy=False)
    count = x.size
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    loss = np.asarray(per.sum(dtype=x.dtype) / count, dtype=x.dtype)

    def backward_fn(g):
        return ((expit(x) - t) * (g / count),)

    return make_result(loss, (logits,), backward_fn)
