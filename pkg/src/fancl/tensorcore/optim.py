"""Adam with bias correction and L2-coupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fancl.errors import NumericError, ShapeError


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0005

    @classmethod
    def for_params(cls, params, weight_decay: float = 0.0005, **kw) -> "AdamState":
        m = [np.zeros_like(p.data) for p in params]
        v = [np.zeros_like(p.data) for p in params]
        return cls(m=m, v=v, weight_decay=weight_decay, **kw)


def adam_step(params, grads, state: AdamState, lr: float, names=None) -> None:
    """One in-place Adam update of ``params`` (list of Tensor).

    ``grads`` is a list of arrays aligned with ``params``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state have different lengths")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ShapeError(f"adam_step: parameter {i} dims {list(p.data.shape)} vs grad {list(g.shape)}")
        if not np.isfinite(g).all():
            label = names[i] if names else (p.name or f"#{i}")
            raise NumericError(f"non-finite gradient for parameter {label}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.data.dtype, copy=False)
