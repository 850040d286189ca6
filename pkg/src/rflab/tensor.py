"""Dense float64 tensors with taped reverse-mode differentiation.

A ``Tape`` records every primitive operation whose inputs carry gradients, in
execution order (which is automatically topological).  ``backward`` replays
the tape once, in reverse, and accumulates gradients into the leaf tensors.
Outside a tape the same operations run as plain numpy with no recording.
"""

from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError, ShapeMismatch

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "relu",
    "sqrt",
    "tsum",
    "tmean",
    "concat",
]


class Tensor:
    """A dense float64 array, optionally marked as a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; plain numbers and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class TapeNode(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient per input (None for constants)
    pull: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self, "tapes must nest"


_ACTIVE: list[Tape] = []


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, pull) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _ACTIVE:
        _ACTIVE[-1].nodes.append(TapeNode(op, inputs, out, pull))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    return _emit("add", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data
    return _emit("sub", (a, b), out,
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    return _emit("mul", (a, b), out,
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return _emit("matmul", (a, b), out,
                 lambda g: (g @ b.data.T, a.data.T @ g))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _emit("tanh", (a,), out, lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), out, lambda g: (g * (0.5 / out),))


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out = a.data.sum(axis=axis)
    if axis is None:
        pull = lambda g: (np.broadcast_to(g, a.shape).copy(),)
    else:
        pull = lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)
    return _emit("sum", (a,), out, pull)


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = a.data.mean()
    return _emit("mean", (a,), out,
                 lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(parts)
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", parts, out, pull)


def backward(tape: Tape, loss: Tensor) -> dict[int, np.ndarray]:
    """Gradients of a scalar `loss` with respect to every leaf on the tape.

    Returns a dict keyed by ``id(leaf)``; each grad-requiring leaf also gets
    its ``.grad`` attribute set.  Every tape node is visited exactly once, in
    reverse execution order, so the result is deterministic.
    """
    if loss.shape != ():
        raise ShapeMismatch(f"backward expects a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise DomainError("backward called on a non-finite loss")

    produced = {id(node.output) for node in tape.nodes}
    flowing: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, np.ndarray] = {}
    leaf_refs: dict[int, Tensor] = {}

    for node in reversed(tape.nodes):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue  # not on a path from the loss
        for tensor, piece in zip(node.inputs, node.pull(g)):
            if piece is None or not tensor.requires_grad:
                continue
            store = flowing if id(tensor) in produced else leaves
            key = id(tensor)
            if key in store:
                store[key] = store[key] + piece
            else:
                store[key] = piece
            if store is leaves:
                leaf_refs[key] = tensor

    for key, tensor in leaf_refs.items():
        tensor.grad = leaves[key]
    return leaves
