"""Tensor value type, computation tape and reverse-mode backward pass."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from fancl.errors import ContractError, NumericError
from fancl.tensorcore.kernels import REGISTRY

_state = threading.local()


def _default_dtype():
    return getattr(_state, "dtype", np.float32)


class precision:
    """Context manager selecting the float width of newly created tensors.

    >>> with precision(np.float64):
    ...     t = Tensor([1.0])
    """

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        self._prev = None

    def __enter__(self):
        self._prev = _default_dtype()
        _state.dtype = self.dtype
        return self

    def __exit__(self, *exc):
        _state.dtype = self._prev


class Tensor:
    """Dense n-d array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.integer) and arr.dtype != np.bool_:
            arr = arr.astype(_default_dtype(), copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def dims(self) -> list[int]:
        return list(self.data.shape)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    cache: Any = None
    requires_grad: bool = False


@dataclass
class Tape:
    """Ordered record of ops; node inputs always point to earlier nodes.

    Leaf and constant tensors enter as ``"leaf"`` / ``"const"`` nodes the
    first time a recorded op touches them.
    """

    nodes: list[Node] = field(default_factory=list)
    _ids: dict[int, int] = field(default_factory=dict)
    _tensors: list[Tensor] = field(default_factory=list)

    def __enter__(self):
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def tensor(self, node_id: int) -> Tensor:
        return self._tensors[node_id]

    def _add(self, t: Tensor, node: Node) -> int:
        self.nodes.append(node)
        self._tensors.append(t)
        nid = len(self.nodes) - 1
        self._ids[id(t)] = nid
        return nid

    def _ensure(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            kind = "leaf" if t.requires_grad else "const"
            nid = self._add(t, Node(kind, (), {}, t.data, requires_grad=t.requires_grad))
        return nid

    def record(self, kind: str, inputs: list[Tensor], attrs: dict, out: Tensor, cache) -> int:
        ids = tuple(self._ensure(t) for t in inputs)
        return self._add(out, Node(kind, ids, attrs, out.data, cache, requires_grad=True))

    def replay(self) -> list[np.ndarray]:
        """Recompute every op node from the recorded leaves."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.kind in ("leaf", "const"):
                values.append(node.value)
            else:
                fwd, _ = REGISTRY[node.kind]
                out, _ = fwd([values[i] for i in node.inputs], node.attrs)
                values.append(out)
        return values


def active_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class no_record:
    """Suspend tape recording (used by frozen probes and feature extraction)."""

    def __enter__(self):
        self._saved = getattr(_state, "tapes", None)
        _state.tapes = []
        return self

    def __exit__(self, *exc):
        _state.tapes = self._saved


def _check_finite(arr: np.ndarray, what: str) -> None:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


def forward_op(kind: str, inputs: list[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate one op and record it on the active tape if any input needs grad."""
    if kind not in REGISTRY:
        raise ContractError(f"unknown op kind {kind!r}")
    attrs = attrs or {}
    for pos, t in enumerate(inputs):
        _check_finite(t.data, f"input {pos} of {kind}")
    fwd, _ = REGISTRY[kind]
    out_data, cache = fwd([t.data for t in inputs], attrs)
    _check_finite(out_data, f"output of {kind}")
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad, dtype=out_data.dtype)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(kind, inputs, attrs, out, cache)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``; returns node id -> gradient.

    Leaf tensors also get their ``.grad`` slot filled.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    root = tape.node_id(loss)
    if root is None:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    for nid in range(root, -1, -1):
        g = grads.get(nid)
        node = tape.nodes[nid]
        if g is None or node.kind in ("leaf", "const"):
            continue
        _, bwd = REGISTRY[node.kind]
        in_values = [tape.nodes[i].value for i in node.inputs]
        in_grads = bwd(g, in_values, node.value, node.cache, node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None or not tape.nodes[i].requires_grad:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    for nid, node in enumerate(tape.nodes):
        if node.kind == "leaf":
            t = tape.tensor(nid)
            t.grad = grads.get(nid, np.zeros_like(t.data))
    return grads


def grads_for(tape: Tape, tensors, grads: dict[int, np.ndarray]) -> list[np.ndarray]:
    """Gradients for ``tensors``; anything absent from the tape gets zeros."""
    out = []
    for t in tensors:
        nid = tape.node_id(t)
        g = grads.get(nid) if nid is not None else None
        out.append(np.zeros_like(t.data) if g is None else g)
    return out
