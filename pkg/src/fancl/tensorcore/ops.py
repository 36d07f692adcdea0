"""Thin named wrappers around :func:`forward_op` plus non-taped helpers."""

from __future__ import annotations

import numpy as np

from fancl.errors import ShapeError
from fancl.tensorcore.autodiff import Tensor, forward_op


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    return forward_op("add", [_t(a), _t(b)])


def mul(a, b) -> Tensor:
    return forward_op("mul", [_t(a), _t(b)])


def scale(x, factor: float) -> Tensor:
    return forward_op("scale", [_t(x)], {"factor": factor})


def matmul(a, b) -> Tensor:
    return forward_op("matmul", [_t(a), _t(b)])


def relu(x) -> Tensor:
    return forward_op("relu", [_t(x)])


def sigmoid(x) -> Tensor:
    return forward_op("sigmoid", [_t(x)])


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    inputs = [_t(x), _t(weight)] + ([_t(bias)] if bias is not None else [])
    return forward_op("conv2d", inputs, {"stride": stride, "pad": pad})


def global_avg_pool(x) -> Tensor:
    return forward_op("global_avg_pool", [_t(x)])


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    return forward_op("l2_normalize", [_t(x)], {"eps": eps})


def concat(tensors, axis: int = -1) -> Tensor:
    return forward_op("concat", [_t(t) for t in tensors], {"axis": axis})


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    return forward_op("sum", [_t(x)], {"axis": axis, "keepdims": keepdims})


def logsumexp(x) -> Tensor:
    return forward_op("logsumexp", [_t(x)])


def linear(x, weight, bias) -> Tensor:
    return add(matmul(x, weight), bias)


class BatchNormStats:
    """Running mean/variance for one batchnorm layer (momentum 0.1)."""

    def __init__(self, channels: int, momentum: float = 0.1, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.tracked = 0

    def update(self, x: np.ndarray) -> None:
        axes = tuple(range(x.ndim - 1))
        count = x.size // x.shape[-1]
        mean = x.mean(axis=axes)
        # running variance tracks the unbiased estimate
        var = x.var(axis=axes) * (count / max(count - 1, 1))
        m = self.momentum
        self.mean = ((1 - m) * self.mean + m * mean).astype(self.mean.dtype)
        self.var = ((1 - m) * self.var + m * var).astype(self.var.dtype)
        self.tracked += 1


def batchnorm2d(x, gamma, beta, stats: BatchNormStats, training: bool, eps: float = 1e-5) -> Tensor:
    """Batch norm over all axes but the last; updates ``stats`` in train mode."""
    x = _t(x)
    if training:
        out = forward_op("batchnorm2d", [x, _t(gamma), _t(beta)], {"mode": "train", "eps": eps})
        stats.update(x.data)
        return out
    attrs = {"mode": "eval", "eps": eps, "running_mean": stats.mean, "running_var": stats.var}
    return forward_op("batchnorm2d", [x, _t(gamma), _t(beta)], attrs)


def bilinear_resize(image, target: tuple[int, int]) -> np.ndarray:
    """Align-corners bilinear resize of an (H, W, C) or (H, W) array.

    Not taped: callers use it only on frozen activation maps.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h2, w2 = target
    if h2 < 1 or w2 < 1:
        raise ShapeError(f"bilinear_resize: target extents {h2}x{w2} must be positive")
    if arr.ndim < 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"bilinear_resize: bad input dims {list(arr.shape)}")
    h, w = arr.shape[:2]
    if (h, w) == (h2, w2):
        return arr.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(arr.dtype)

    y0, y1, fy = coords(h, h2)
    x0, x1, fx = coords(w, w2)
    extra = (None,) * (arr.ndim - 2)
    fy = fy[(slice(None), None) + extra]
    fx = fx[(None, slice(None)) + extra]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bottom = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(arr.dtype, copy=False)
