"""Reverse-mode automatic differentiation over an explicit tape.

Values are float64 numpy arrays. Every op appends one node to the tape of its
operands; ``backward`` walks the tape once in reverse insertion order.
Broadcasting is limited to adding a row-vector bias to a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


class DomainError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple] | None = None


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def _push(self, op, inputs, value, backward=None) -> "Var":
        self.nodes.append(Node(op, tuple(inputs), value, backward))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value) -> "Var":
        return self._push("leaf", (), np.array(value, dtype=np.float64))

    def constant(self, value) -> "Var":
        return self._push("const", (), np.array(value, dtype=np.float64))

    def __len__(self):
        return len(self.nodes)


class Var:
    """Handle on one tape node."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: Tape, id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, _lift(self, other))

    def __radd__(self, other):
        return add(_lift(self, other), self)

    def __sub__(self, other):
        return subtract(self, _lift(self, other))

    def __rsub__(self, other):
        return subtract(_lift(self, other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, _lift(self, other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


def _lift(ref: Var, x) -> Var:
    if isinstance(x, Var):
        return x
    return ref.tape.constant(x)


def _same_tape(op, *vs):
    tape = vs[0].tape
    for v in vs[1:]:
        if v.tape is not tape:
            raise ContractError(f"{op}: operands recorded on different tapes")
    return tape


# -- catalog ----------------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    tape = _same_tape("matmul", a, b)
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError("matmul", A.shape, B.shape)
    return tape._push("matmul", (a.id, b.id), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Var, b: Var) -> Var:
    tape = _same_tape("add", a, b)
    A, B = a.value, b.value
    if A.shape == B.shape:
        return tape._push("add", (a.id, b.id), A + B, lambda g: (g, g))
    if A.ndim == 2 and B.ndim == 1 and A.shape[1] == B.shape[0]:
        return tape._push("add", (a.id, b.id), A + B, lambda g: (g, g.sum(axis=0)))
    raise ShapeError("add", A.shape, B.shape)


def subtract(a: Var, b: Var) -> Var:
    tape = _same_tape("subtract", a, b)
    A, B = a.value, b.value
    if A.shape != B.shape:
        raise ShapeError("subtract", A.shape, B.shape)
    return tape._push("subtract", (a.id, b.id), A - B, lambda g: (g, -g))


def hadamard(a: Var, b: Var) -> Var:
    tape = _same_tape("hadamard", a, b)
    A, B = a.value, b.value
    if A.shape != B.shape:
        raise ShapeError("hadamard", A.shape, B.shape)
    return tape._push("hadamard", (a.id, b.id), A * B, lambda g: (g * B, g * A))


def scale(a: Var, c: float) -> Var:
    return a.tape._push("scale", (a.id,), a.value * c, lambda g: (g * c,))


def sigmoid(a: Var) -> Var:
    x = a.value
    # split by sign to avoid exp overflow
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return a.tape._push("sigmoid", (a.id,), out, lambda g: (g * out * (1.0 - out),))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape._push("tanh", (a.id,), out, lambda g: (g * (1.0 - out * out),))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return a.tape._push("exp", (a.id,), out, lambda g: (g * out,))


def log(a: Var) -> Var:
    x = a.value
    if np.any(x <= 0):
        raise DomainError(f"log: non-positive input (min {x.min()!r})")
    return a.tape._push("log", (a.id,), np.log(x), lambda g: (g / x,))


def sum(a: Var) -> Var:
    shape = a.value.shape
    return a.tape._push("sum", (a.id,), np.array(a.value.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Var) -> Var:
    shape = a.value.shape
    n = a.value.size
    return a.tape._push("mean", (a.id,), np.array(a.value.mean()), lambda g: (np.full(shape, float(g) / n),))


def mse(a: Var, b: Var) -> Var:
    """Mean over all entries of ``(a - b)**2``."""
    tape = _same_tape("mse", a, b)
    A, B = a.value, b.value
    if A.shape != B.shape:
        raise ShapeError("mse", A.shape, B.shape)
    diff = A - B
    n = diff.size

    def bw(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return tape._push("mse", (a.id, b.id), np.array(np.mean(diff * diff)), bw)


# -- structural helpers -------------------------------------------------------


def transpose(a: Var) -> Var:
    return a.tape._push("transpose", (a.id,), a.value.T.copy(), lambda g: (g.T,))


def square(a: Var) -> Var:
    x = a.value
    return a.tape._push("square", (a.id,), x * x, lambda g: (2.0 * g * x,))


def columns(a: Var, start: int, stop: int) -> Var:
    """Column slice ``a[:, start:stop]`` of a matrix (or ``a[start:stop]`` of a vector)."""
    x = a.value

    def bw(g):
        full = np.zeros_like(x)
        full[..., start:stop] = g
        return (full,)

    return a.tape._push("columns", (a.id,), x[..., start:stop].copy(), bw)


def clip(a: Var, lo: float, hi: float) -> Var:
    x = a.value
    inside = (x >= lo) & (x <= hi)
    return a.tape._push("clip", (a.id,), np.clip(x, lo, hi), lambda g: (g * inside,))


def rows(table: Var, index: Sequence[int]) -> Var:
    """Gather rows of a matrix; gradients scatter-add back."""
    idx = np.asarray(index, dtype=np.int64)
    T = table.value

    def bw(g):
        full = np.zeros_like(T)
        np.add.at(full, idx, g)
        return (full,)

    return table.tape._push("rows", (table.id,), T[idx].copy(), bw)


def stop_gradient(a: Var) -> Var:
    return a.tape.constant(a.value.copy())


def custom(tape: Tape, op: str, inputs: Sequence[Var], value, backward) -> Var:
    """Record an op whose local derivative is supplied by the caller."""
    return tape._push(op, [v.id for v in inputs], np.asarray(value, dtype=np.float64), backward)


# -- backward ----------------------------------------------------------------


def backward(tape: Tape, output: Var) -> dict[int, np.ndarray]:
    if output.tape is not tape:
        raise ContractError("backward: output node belongs to another tape")
    if output.value.size != 1:
        raise ContractError(f"backward: output must be scalar, got shape {output.value.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for nid in range(output.id, -1, -1):
        node = tape.nodes[nid]
        g = grads.get(nid)
        if g is None or node.backward is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if inp in grads:
                grads[inp] = grads[inp] + gi
            else:
                grads[inp] = gi
    for nid, node in enumerate(tape.nodes):
        if node.op == "leaf" and nid not in grads:
            grads[nid] = np.zeros_like(node.value)
    return grads


def grad_check(function, point, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``function(tape, *leaves)`` must return a scalar Var. ``point`` is one array
    or a list of arrays, one per leaf. The error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in (point if isinstance(point, (list, tuple)) else [point])]

    def evaluate(vals):
        tape = Tape()
        leaves = [tape.leaf(v) for v in vals]
        return tape, leaves, function(tape, *leaves)

    tape, leaves, out = evaluate(arrays)
    grads = backward(tape, out)
    worst = 0.0
    for i, arr in enumerate(arrays):
        analytic = grads[leaves[i].id]
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = float(evaluate(arrays)[2].value)
            flat[j] = orig - step
            fm = float(evaluate(arrays)[2].value)
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * step)
            err = abs(analytic.reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
