"""Dense float64 matrices with define-by-run reverse-mode differentiation.

A :class:`Tape` records every operation in insertion order, which is also a
topological order, so :meth:`Tape.backward` is a single reverse sweep.  Values
are 2-D ``numpy.float64`` arrays; shapes must match exactly (the only implicit
expansion is :func:`add_bias`, which adds a ``1 x cols`` row to every row).

    >>> tape = Tape()
    >>> w = tape.leaf(np.ones((2, 1)))
    >>> x = tape.const(np.array([[1.0, 2.0]]))
    >>> loss = total(matmul(x, w))
    >>> _ = tape.backward(loss)
    >>> w.grad.ravel().tolist()
    [1.0, 2.0]
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "NumericError",
    "Node",
    "Tape",
    "as_matrix",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "tanh",
    "sigmoid",
    "sqrt",
    "add_bias",
    "row_sum",
    "total",
    "mse",
    "detach",
    "elementwise",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {a.shape}")
    return a


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"non-finite value produced by {op}")


class Node:
    """One recorded value on a tape.

    ``grad`` has the same shape as ``value`` and is zero until
    :meth:`Tape.backward` runs.
    """

    __slots__ = ("tape", "id", "value", "grad", "op", "parents", "needs_grad", "_backward")

    def __init__(self, tape: "Tape", value: np.ndarray, op: str,
                 parents: Sequence["Node"] = (),
                 backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
                 needs_grad: Optional[bool] = None):
        self.tape = tape
        self.value = value
        self.grad = np.zeros_like(value)
        self.op = op
        self.parents = tuple(p.id for p in parents)
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in parents)
        self.needs_grad = needs_grad
        self._backward = backward if needs_grad else None
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


class Tape:
    """Append-only computation record.

    A tape is owned by one thread while it is built and differentiated.
    """

    def __init__(self, rng_seed: int = 0):
        self.nodes: list[Node] = []
        self.rng_seed = int(rng_seed)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value) -> Node:
        """Record an input that collects a gradient (a parameter)."""
        v = as_matrix(value).copy()
        _check_finite(v, "leaf")
        return Node(self, v, "leaf", needs_grad=True)

    def const(self, value) -> Node:
        """Record an input treated as a constant.

        Constants (and anything computed only from constants) are skipped by
        the backward sweep; their ``grad`` stays zero.
        """
        v = as_matrix(value)
        _check_finite(v, "const")
        return Node(self, v, "const", needs_grad=False)

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad.fill(0.0)

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Fill ``grad`` of every node reachable backwards from ``loss``.

        Gradients are recomputed from zero on every call, so repeated calls on
        the same tape give bit-identical results.
        """
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        self.zero_grad()
        reached = np.zeros(len(self.nodes), dtype=bool)
        reached[loss.id] = True
        loss.grad[...] = 1.0
        for node in reversed(self.nodes[: loss.id + 1]):
            if not reached[node.id] or node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for pid, g in zip(node.parents, parent_grads):
                parent = self.nodes[pid]
                if g is None or not parent.needs_grad:
                    continue
                parent.grad += g
                reached[pid] = True
        return {n.id: n.grad for n in self.nodes if reached[n.id]}


def _same_tape(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands recorded on different tapes")
    return tape


def _same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def _record(tape: Tape, value: np.ndarray, op: str, parents, backward) -> Node:
    _check_finite(value, op)
    return Node(tape, value, op, parents, backward)


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(f"matmul: {a.value.shape} x {b.value.shape}")
    av, bv = a.value, b.value
    need_a, need_b = a.needs_grad, b.needs_grad

    def back(g):
        return (g @ bv.T if need_a else None), (av.T @ g if need_b else None)

    return _record(tape, av @ bv, "matmul", (a, b), back)


def add(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _same_shape(a, b, "add")
    return _record(tape, a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _same_shape(a, b, "sub")
    return _record(tape, a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape(a, b)
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _record(tape, av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _record(a.tape, a.value * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Node) -> Node:
    mask = a.value > 0.0
    return _record(a.tape, np.where(mask, a.value, 0.0), "relu", (a,),
                   lambda g: (g * mask,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return _record(a.tape, y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Node) -> Node:
    x = a.value
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(a.tape, y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def sqrt(a: Node, eps: float = 0.0) -> Node:
    """``sqrt(a + eps)``; ``eps`` keeps the derivative finite at zero."""
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.value + eps)
    return _record(a.tape, y, "sqrt", (a,), lambda g: (g * 0.5 / y,))


def add_bias(x: Node, b: Node) -> Node:
    """Add the ``1 x cols`` row ``b`` to every row of ``x``."""
    tape = _same_tape(x, b)
    if b.value.shape != (1, x.value.shape[1]):
        raise DimensionError(f"add_bias: bias {b.value.shape} for input {x.value.shape}")
    return _record(tape, x.value + b.value, "add_bias", (x, b),
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def row_sum(a: Node) -> Node:
    """Sum across columns, giving an ``rows x 1`` column."""
    cols = a.value.shape[1]
    return _record(a.tape, a.value.sum(axis=1, keepdims=True), "row_sum", (a,),
                   lambda g: (np.repeat(g, cols, axis=1),))


def total(a: Node) -> Node:
    shape = a.value.shape
    return _record(a.tape, np.array([[a.value.sum()]]), "total", (a,),
                   lambda g: (np.full(shape, g[0, 0]),))


def mse(pred: Node, target) -> Node:
    """Mean squared difference to a constant target."""
    t = target.value if isinstance(target, Node) else as_matrix(target)
    if t.shape != pred.value.shape:
        raise DimensionError(f"mse: shape mismatch {pred.value.shape} vs {t.shape}")
    diff = pred.value - t
    n = diff.size
    return _record(pred.tape, np.array([[np.mean(diff * diff)]]), "mse", (pred,),
                   lambda g: (g[0, 0] * 2.0 * diff / n,))


def detach(x: Node) -> Node:
    """Same value, no gradient path back to ``x``."""
    return Node(x.tape, x.value.copy(), "detach", needs_grad=False)


_UNARY = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Node, b=None) -> Node:
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``relu``, ``tanh``, ``sigmoid``, ``scale``."""
    if op in _UNARY:
        return _UNARY[op](a)
    if op in _BINARY:
        return _BINARY[op](a, b)
    if op == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")
