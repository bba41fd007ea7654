"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Only the handful of primitives the cold-start model needs are provided:
matrix products, bias broadcast, ReLU, the six elementwise modulation
operations, row gathers/segment means for batching tasks, slicing and
concatenation along the feature axis, and scalar mixing for supernet
weights.  Every primitive records a backward closure on its output; calling
:meth:`Tensor.backward` replays the recorded ops once each in reverse
topological order.
"""

from __future__ import annotations

import contextvars
import enum
import math
from collections.abc import Callable, Sequence
from typing import Optional

import numpy as np

DIV_EPSILON = 1e-8


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    def __init__(self, message: str, index: tuple[int, ...]):
        super().__init__(message)
        self.index = index


class NumericalError(ArithmeticError):
    pass


class BinaryOpKind(enum.Enum):
    MAX = "max"
    MIN = "min"
    MUL = "mul"
    DIV = "div"
    ADD = "add"
    SUB = "sub"

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]


_SYMBOLS = {
    BinaryOpKind.MAX: "max",
    BinaryOpKind.MIN: "min",
    BinaryOpKind.MUL: "*",
    BinaryOpKind.DIV: "/",
    BinaryOpKind.ADD: "+",
    BinaryOpKind.SUB: "-",
}


class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, *, _parents: tuple = (), _op: str = "leaf"):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> list["Tensor"]:
        """Backpropagate from this tensor; returns the record that was replayed."""
        if grad is None:
            if self.values.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.values)
        record = computation_record(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(record):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return record

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar, used in tests and the oracle
    def __add__(self, other):
        return elementwise(BinaryOpKind.ADD, self, _wrap(other, self.shape))

    def __sub__(self, other):
        return elementwise(BinaryOpKind.SUB, self, _wrap(other, self.shape))

    def __mul__(self, other):
        return elementwise(BinaryOpKind.MUL, self, _wrap(other, self.shape))

    def __truediv__(self, other):
        return elementwise(BinaryOpKind.DIV, self, _wrap(other, self.shape))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=np.float64), shape))


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def computation_record(output: Tensor) -> list[Tensor]:
    """Topologically ordered list of every tensor ``output`` depends on."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _result(values: np.ndarray, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=requires, _parents=parents if requires else (), _op=op)
    if requires:
        out._backward = backward
    return out


# --- primitives -------------------------------------------------------------


class MacCounter:
    """Counts forward multiply-accumulates of matmul/linear while active."""

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        self._token = _MAC_COUNTER.set(self)
        return self

    def __exit__(self, *exc):
        _MAC_COUNTER.reset(self._token)
        return False


_MAC_COUNTER: contextvars.ContextVar[Optional[MacCounter]] = contextvars.ContextVar("mac_counter", default=None)


def _count(n: int) -> None:
    c = _MAC_COUNTER.get()
    if c is not None:
        c.macs += int(n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.values, b.values
    _count(av.shape[0] * av.shape[1] * bv.shape[1])

    def backward(g):
        return g @ bv.T, av.T @ g

    return _result(av @ bv, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _result(a.values.T.copy(), (a,), "transpose", lambda g: (g.T,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with weight stored (out, in)."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear bias shape {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.values, weight.values
    _count(xv.shape[0] * wv.shape[0] * wv.shape[1])

    def backward(g):
        return g @ wv, g.T @ xv, g.sum(axis=0)

    return _result(xv @ wv.T + bias.values, (x, weight, bias), "linear", backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if x.values.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"bias {bias.shape} cannot broadcast over {x.shape}")
    return _result(x.values + bias.values, (x, bias), "add_bias", lambda g: (g, g.sum(axis=0)))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _result(np.where(mask, x.values, 0.0), (x,), "relu", lambda g: (g * mask,))


def elementwise(op: BinaryOpKind, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"{op.value}: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    if op is BinaryOpKind.ADD:
        return _result(av + bv, (a, b), "add", lambda g: (g, g))
    if op is BinaryOpKind.SUB:
        return _result(av - bv, (a, b), "sub", lambda g: (g, -g))
    if op is BinaryOpKind.MUL:
        return _result(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))
    if op is BinaryOpKind.DIV:
        bad = np.abs(bv) < DIV_EPSILON
        if bad.any():
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DomainError(f"division by |b| < {DIV_EPSILON:g} at index {idx}", idx)

        def div_backward(g):
            return g / bv, -g * av / (bv * bv)

        return _result(av / bv, (a, b), "div", div_backward)
    if op is BinaryOpKind.MAX:
        pick_a = av >= bv  # ties go to the hidden-state side
        return _result(np.where(pick_a, av, bv), (a, b), "max", lambda g: (g * pick_a, g * ~pick_a))
    if op is BinaryOpKind.MIN:
        pick_a = av <= bv
        return _result(np.where(pick_a, av, bv), (a, b), "min", lambda g: (g * pick_a, g * ~pick_a))
    raise ValueError(f"unknown op {op!r}")


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the single-element tensor ``s``."""
    if s.values.size != 1:
        raise DimensionError(f"scale factor must hold one element, got {s.shape}")
    sv = float(s.values.reshape(-1)[0])
    xv = x.values

    def backward(g):
        return g * sv, np.array([np.sum(g * xv)]).reshape(s.shape)

    return _result(xv * sv, (x, s), "scale", backward)


def mix(alpha: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``alpha * a + (1 - alpha) * b`` for a scalar ``alpha``."""
    if a.shape != b.shape:
        raise DimensionError(f"mix shape mismatch {a.shape} vs {b.shape}")
    if alpha.values.size != 1:
        raise DimensionError(f"mix weight must hold one element, got {alpha.shape}")
    w = float(alpha.values.reshape(-1)[0])
    av, bv = a.values, b.values

    def backward(g):
        return np.array([np.sum(g * (av - bv))]).reshape(alpha.shape), g * w, g * (1.0 - w)

    return _result(w * av + (1.0 - w) * bv, (alpha, a, b), "mix", backward)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along the feature axis."""
    if not parts:
        raise ValueError("concat of nothing")
    rows = parts[0].shape[0]
    for p in parts:
        if p.values.ndim != 2 or p.shape[0] != rows:
            raise DimensionError(f"concat row mismatch: {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _result(np.concatenate([p.values for p in parts], axis=1), tuple(parts), "concat", backward)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    if x.values.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise DimensionError(f"column slice [{start}:{stop}] out of range for {x.shape}")
    ncols = x.shape[1]

    def backward(g):
        full = np.zeros((g.shape[0], ncols))
        full[:, start:stop] = g
        return (full,)

    return _result(x.values[:, start:stop].copy(), (x,), "columns", backward)


def scatter_rows(index: np.ndarray, g: np.ndarray, nrows: int) -> np.ndarray:
    """``out[index[i]] += g[i]`` for every row, vectorized via a sort and reduceat."""
    out = np.zeros((nrows, g.shape[1]))
    if index.size == 0:
        return out
    if np.all(index[1:] >= index[:-1]):
        order = None
        sidx = index
    else:
        order = np.argsort(index, kind="stable")
        sidx = index[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    rows = g if order is None else g[order]
    out[sidx[starts]] = np.add.reduceat(rows, starts, axis=0)
    return out


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``x[index]``; backward scatter-adds into the source rows."""
    index = np.asarray(index, dtype=np.intp)
    if x.values.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise IndexError(f"row index out of bounds for {x.shape[0]} rows")
    nrows = x.shape[0]

    def backward(g):
        return (scatter_rows(index, g, nrows),)

    return _result(x.values[index], (x,), "gather_rows", backward)


def segment_mean(x: Tensor, segments: np.ndarray, n_segments: int) -> Tensor:
    """Mean of the rows of ``x`` sharing a segment id; one output row per segment."""
    segments = np.asarray(segments, dtype=np.intp)
    if x.values.ndim != 2 or segments.shape != (x.shape[0],):
        raise DimensionError(f"segment ids {segments.shape} do not match rows of {x.shape}")
    counts = np.bincount(segments, minlength=n_segments).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("segment_mean: every segment needs at least one row")
    out = scatter_rows(segments, x.values, n_segments) / counts[:, None]

    def backward(g):
        return ((g / counts[:, None])[segments],)

    return _result(out, (x,), "segment_mean", backward)


def stack(rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ValueError("stack of nothing")
    d = rows[0].shape
    for r in rows:
        if r.shape != d or r.values.ndim != 1:
            raise DimensionError(f"stack needs equal-length vectors, got {[q.shape for q in rows]}")

    def backward(g):
        return tuple(g[i] for i in range(len(rows)))

    return _result(np.stack([r.values for r in rows]), tuple(rows), "stack", backward)


def mean_pool(rows: Sequence[Tensor]) -> Tensor:
    """Coordinate-wise mean of a non-empty sequence of equal-length vectors."""
    if len(rows) == 0:
        raise ValueError("mean_pool needs at least one row")
    stacked = stack(list(rows))
    n = stacked.shape[0]
    return _result(stacked.values.mean(axis=0), (stacked,), "mean_pool",
                   lambda g: (np.broadcast_to(g / n, stacked.shape),))


def square(x: Tensor) -> Tensor:
    xv = x.values
    return _result(xv * xv, (x,), "square", lambda g: (2.0 * g * xv,))


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.array([x.values.sum()]), (x,), "sum", lambda g: (np.broadcast_to(g.reshape(-1)[0], shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.values.size
    return _result(np.array([x.values.mean()]), (x,), "mean", lambda g: (np.broadcast_to(g.reshape(-1)[0] / n, shape),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.values.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


# --- gradient checking ------------------------------------------------------


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                    coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated from scratch for every perturbation, so it must read
    the current values of ``inputs``.  ``coords`` limits the number of
    coordinates probed per input (sampled with ``rng``); by default all are
    probed.  Relative error is ``|a - n| / max(1, |a|, |n|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for t in inputs:
        t.grad = None
    out = f()
    if not np.all(np.isfinite(out.values)):
        raise NumericalError("non-finite function value")
    out.backward()
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.values.reshape(-1)
        picks = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            picks = rng.choice(flat.size, size=coords, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite value while perturbing coordinate {i}")
            numeric = (up - down) / (2 * eps)
            a = ga.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
