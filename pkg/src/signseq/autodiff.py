"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record a node on the active :class:`Tape` only while one is open
and at least one operand requires a gradient, so pure inference runs with no
bookkeeping at all::

    with Tape() as tape:
        loss = ops.mean(ops.tanh(x @ w))
    backward(tape, loss)
    w.grad  # d(loss)/d(w)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for autodiff failures."""


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


class Tensor:
    """Dense float64 array that may participate in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Named trainable leaf tensor; its gradient buffer always exists."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Append-only record of operations, consumed by a single backward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()

# Toggled off only by benchmarks; every recorded or unrecorded op checks by default.
CHECK_FINITE = True


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        tape = active_tape()
        where = f"node #{len(tape.nodes)}" if tape is not None else "untaped"
        raise NonFiniteError(f"non-finite output from op '{op}' ({where})")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        out._leaf = False
        out.name = f"{op}#{len(tape.nodes)}"
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 3-d operands are treated as stacks of matrices."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    return _emit("matmul", (a, b), A @ B, back)


def _bias_compatible(a: Tensor, b: Tensor) -> bool:
    return b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1]


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))
    if _bias_compatible(a, b):
        lead = tuple(range(a.data.ndim - 1))
        return _emit("add", (a, b), a.data + b.data, lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    return _emit("scale", (a,), a.data * k, lambda g: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(a.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", (a,), y, back)


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log of non-positive value")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    arrays = [t.data for t in tensors]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tensors, out, back)


def slice_(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """Take ``[start:stop]`` along ``axis``."""
    size = a.shape[axis]
    if not 0 <= start < stop <= size:
        raise ShapeError(f"slice [{start}:{stop}] of axis with size {size}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def back(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit("slice", (a,), a.data[index], back)


def select(a: Tensor, i: int, axis: int = 1) -> Tensor:
    """Take index ``i`` along ``axis``, dropping that axis."""
    if not -a.shape[axis] <= i < a.shape[axis]:
        raise ShapeError(f"index {i} out of range for axis of size {a.shape[axis]}")

    def back(g):
        full = np.zeros_like(a.data)
        idx = [slice(None)] * a.data.ndim
        idx[axis] = i
        full[tuple(idx)] = g
        return (full,)

    return _emit("select", (a,), np.take(a.data, i, axis=axis), back)


def stack(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack shapes {[t.shape for t in tensors]}") from exc

    def back(g):
        return tuple(np.take(g, k, axis=axis) for k in range(len(tensors)))

    return _emit("stack", tensors, out, back)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]`` for an integer array of ids."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("embedding", (table,), table.data[ids], back)


def sum_(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.full_like(a.data, g),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _emit("mean", (a,), np.asarray(a.data.mean()),
                 lambda g: (np.full_like(a.data, g / n),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _emit("expand", (a,), out, lambda g: (g.sum(axis=axis),))


def grl(a: Tensor, lam: float) -> Tensor:
    """Gradient reversal: identity forward, upstream gradient times ``-lam`` backward."""
    if lam < 0:
        raise ValueError("gradient reversal factor must be >= 0")
    k = -float(lam)
    return _emit("grl", (a,), a.data.copy(), lambda g: (g * k,))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted sum of ``-log softmax(logits)[target]`` over rows.

    ``weights`` (one per row, default ones) lets callers mask padding and
    choose the normaliser; a plain mean is ``weights = 1/rows``.
    """
    x = logits.data
    if x.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(x.shape[0])
    w = np.ones(x.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[rows, targets]
    out = np.asarray((w * nll).sum())

    def back(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, targets] -= 1.0
        return (g * w[:, None] * p,)

    return _emit("cross_entropy", (logits,), out, back)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", (a,), a.data * keep, lambda g: (g * keep,))


OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "neg": neg,
    "scale": scale, "tanh": tanh, "sigmoid": sigmoid, "softmax": softmax,
    "log": log, "concat": concat, "slice": slice_, "select": select, "stack": stack, "embedding": embedding,
    "sum": sum_, "mean": mean, "reshape": reshape, "expand": expand,
    "grl": grl, "cross_entropy": cross_entropy,
}


def apply(op_kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch an operation by name."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise AutodiffError(f"unknown op '{op_kind}'") from None
    return fn(*operands, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf reached from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a backward pass")
    tape.consumed = True
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.nodes.clear()


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: dict = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> dict:
        return {k: v < self.tolerance for k, v in self.max_rel_error.items()}

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    @property
    def failures(self) -> list:
        return [k for k, ok in self.passed.items() if not ok]

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def finite_diff_check(fn: Callable[[], Tensor], params: Iterable[Parameter],
                      step: float = 1e-5, tolerance: float = 1e-4,
                      floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``fn()`` with central differences.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dividing by noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    base1 = float(fn().data)
    base2 = float(fn().data)
    if base1 != base2:
        raise AutodiffError("fn is non-deterministic: repeated evaluations differ")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
    backward(tape, loss)

    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(fn().data)
            flat[i] = orig - step
            down = float(fn().data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
        report.max_rel_error[p.name] = worst
    return report

