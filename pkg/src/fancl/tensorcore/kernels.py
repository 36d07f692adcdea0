"""Numpy forward/backward kernels for every differentiable op kind.

Each kernel pair has the signature::

    forward(inputs, attrs) -> (output, cache)
    backward(grad_out, inputs, output, cache, attrs) -> list of input grads

Backward entries may be ``None`` for inputs that take no gradient.
Image tensors are channels-last (N, H, W, C); conv weights are
(kh, kw, C_in, C_out).
"""

from __future__ import annotations

from typing import Any, Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from fancl.errors import ShapeError

ForwardFn = Callable[[list, dict], tuple]
BackwardFn = Callable[[np.ndarray, list, np.ndarray, Any, dict], list]

REGISTRY: dict[str, tuple[ForwardFn, BackwardFn]] = {}


def register(kind: str):
    def wrap(pair_factory):
        REGISTRY[kind] = pair_factory()
        return pair_factory

    return wrap


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_dims(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast dims {list(a.shape)} and {list(b.shape)}") from None


@register("add")
def _add():
    def fwd(inputs, attrs):
        a, b = inputs
        _broadcast_dims(a, b, "add")
        return a + b, None

    def bwd(g, inputs, out, cache, attrs):
        a, b = inputs
        return [unbroadcast(g, a.shape), unbroadcast(g, b.shape)]

    return fwd, bwd


@register("mul")
def _mul():
    def fwd(inputs, attrs):
        a, b = inputs
        _broadcast_dims(a, b, "mul")
        return a * b, None

    def bwd(g, inputs, out, cache, attrs):
        a, b = inputs
        return [unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)]

    return fwd, bwd


@register("scale")
def _scale():
    def fwd(inputs, attrs):
        return inputs[0] * attrs["factor"], None

    def bwd(g, inputs, out, cache, attrs):
        return [g * attrs["factor"]]

    return fwd, bwd


@register("matmul")
def _matmul():
    def fwd(inputs, attrs):
        a, b = inputs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible dims {list(a.shape)} and {list(b.shape)}")
        return a @ b, None

    def bwd(g, inputs, out, cache, attrs):
        a, b = inputs
        return [g @ b.T, a.T @ g]

    return fwd, bwd


@register("relu")
def _relu():
    def fwd(inputs, attrs):
        x = inputs[0]
        return np.maximum(x, 0).astype(x.dtype, copy=False), None

    def bwd(g, inputs, out, cache, attrs):
        return [g * (inputs[0] > 0)]

    return fwd, bwd


@register("sigmoid")
def _sigmoid():
    def fwd(inputs, attrs):
        x = inputs[0]
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    def bwd(g, inputs, out, cache, attrs):
        return [g * out * (1.0 - out)]

    return fwd, bwd


def conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


@register("conv2d")
def _conv2d():
    def fwd(inputs, attrs):
        x, w = inputs[0], inputs[1]
        bias = inputs[2] if len(inputs) > 2 else None
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(f"conv2d: input dims {list(x.shape)} incompatible with weight dims {list(w.shape)}")
        if bias is not None and bias.shape != (w.shape[3],):
            raise ShapeError(f"conv2d: bias dims {list(bias.shape)} do not match {w.shape[3]} output channels")
        n, h, wd, c = x.shape
        kh, kw, _, cout = w.shape
        ho, wo = conv_out_extent(h, kh, stride, pad), conv_out_extent(wd, kw, stride, pad)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
        win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
        out = cols @ w.reshape(kh * kw * c, cout)
        if bias is not None:
            out = out + bias
        return out.reshape(n, ho, wo, cout), cols

    def bwd(g, inputs, out, cache, attrs):
        x, w = inputs[0], inputs[1]
        stride, pad = attrs.get("stride", 1), attrs.get("pad", 0)
        cols = cache
        n, h, wd, c = x.shape
        kh, kw, _, cout = w.shape
        _, ho, wo, _ = g.shape
        gf = g.reshape(-1, cout)
        dw = (cols.T @ gf).reshape(w.shape)
        dcols = (gf @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, c)
        dxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, :, i, j]
        dx = dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp
        grads = [dx, dw]
        if len(inputs) > 2:
            grads.append(gf.sum(axis=0))
        return grads

    return fwd, bwd


@register("batchnorm2d")
def _batchnorm():
    """Per-channel normalization over every axis except the last.

    Works for (N, C) and (N, H, W, C). Running statistics enter as
    constant attrs in eval mode; their update is the caller's job so the
    kernel stays pure and replayable.
    """

    def fwd(inputs, attrs):
        x, gamma, beta = inputs
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"batchnorm2d: affine dims {list(gamma.shape)} do not match {c} channels")
        eps = attrs.get("eps", 1e-5)
        axes = tuple(range(x.ndim - 1))
        if attrs.get("mode", "train") == "train":
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
        else:
            mean = np.asarray(attrs["running_mean"], dtype=x.dtype)
            var = np.asarray(attrs["running_var"], dtype=x.dtype)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean) * invstd
        return xhat * gamma + beta, (xhat, invstd)

    def bwd(g, inputs, out, cache, attrs):
        x, gamma, _ = inputs
        xhat, invstd = cache
        axes = tuple(range(x.ndim - 1))
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma
        if attrs.get("mode", "train") == "train":
            count = x.size // x.shape[-1]
            dx = invstd / count * (count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * invstd
        return [dx, dgamma, dbeta]

    return fwd, bwd


@register("global_avg_pool")
def _gap():
    def fwd(inputs, attrs):
        x = inputs[0]
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool: expected (N, H, W, C) input, got dims {list(x.shape)}")
        return x.mean(axis=(1, 2)), None

    def bwd(g, inputs, out, cache, attrs):
        x = inputs[0]
        _, h, w, _ = x.shape
        return [np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy()]

    return fwd, bwd


@register("l2_normalize")
def _l2_normalize():
    def fwd(inputs, attrs):
        x = inputs[0]
        eps = attrs.get("eps", 1e-12)
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
        denom = np.maximum(norm, eps)
        return x / denom, (norm, denom)

    def bwd(g, inputs, out, cache, attrs):
        norm, denom = cache
        eps = attrs.get("eps", 1e-12)
        proj = (g * out).sum(axis=-1, keepdims=True)
        inside = norm > eps
        return [np.where(inside, (g - out * proj) / denom, g / denom)]

    return fwd, bwd


@register("concat")
def _concat():
    def fwd(inputs, attrs):
        axis = attrs.get("axis", -1)
        try:
            out = np.concatenate(inputs, axis=axis)
        except ValueError:
            raise ShapeError(f"concat: incompatible dims {[list(t.shape) for t in inputs]} along axis {axis}") from None
        return out, None

    def bwd(g, inputs, out, cache, attrs):
        axis = attrs.get("axis", -1)
        cuts = np.cumsum([t.shape[axis] for t in inputs])[:-1]
        return list(np.split(g, cuts, axis=axis))

    return fwd, bwd


@register("sum")
def _sum():
    def fwd(inputs, attrs):
        return np.asarray(inputs[0].sum(axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False))), None

    def bwd(g, inputs, out, cache, attrs):
        x = inputs[0]
        axis = attrs.get("axis")
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, x.shape).copy()]

    return fwd, bwd


@register("logsumexp")
def _logsumexp():
    # max-shifted so logits up to 1/tau stay finite
    def fwd(inputs, attrs):
        x = inputs[0]
        m = x.max(axis=-1, keepdims=True)
        e = np.exp(x - m)
        s = e.sum(axis=-1, keepdims=True)
        return (m + np.log(s))[..., 0], e / s

    def bwd(g, inputs, out, cache, attrs):
        return [g[..., None] * cache]

    return fwd, bwd
