"""Central finite-difference gradient checking (float64 only)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from fancl.errors import ContractError, KinkError
from fancl.tensorcore.autodiff import Tape, Tensor, backward, grads_for

KINK_MARGIN = 1e-4


def _relu_kinks(tape: Tape, margin: float) -> bool:
    for node in tape.nodes:
        if node.kind == "relu":
            x = tape.nodes[node.inputs[0]].value
            if np.any(np.abs(x) < margin):
                return True
    return False


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
    kink_check: Callable[[Tape], bool] | None = None,
) -> float:
    """Max relative error between taped gradients and central differences.

    ``fn(*inputs)`` must build a scalar. The error per coordinate is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. With
    ``coords`` set, only that many randomly chosen coordinates per input
    are probed. Raises :class:`KinkError` when any relu input (or whatever
    ``kink_check`` flags) sits within 1e-4 of a kink.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit inputs")
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ContractError("grad_check: subgraph output is not scalar")
    if _relu_kinks(tape, KINK_MARGIN) or (kink_check is not None and kink_check(tape)):
        raise KinkError("sample lies within 1e-4 of a kink; resample")
    grads = grads_for(tape, inputs, backward(tape, out))

    def value() -> float:
        return float(fn(*inputs).data)

    worst = 0.0
    for t, g in zip(inputs, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        idx = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, size=coords, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            up = value()
            flat[j] = orig - h
            down = value()
            flat[j] = orig
            numeric = (up - down) / (2 * h)
            analytic = float(gflat[j])
            err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            worst = max(worst, err)
    return worst
