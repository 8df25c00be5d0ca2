"""Reverse-mode differentiation over dense float64 arrays.

Every :class:`DiffValue` is a node on an append-only :class:`Tape`.  Nodes are
appended in evaluation order, so walking the tape backwards from the loss is a
reverse topological order and each node is visited exactly once.

Binary elementwise ops accept equal shapes, or a scalar (shape ``()``) on
either side.  Anything else needs an explicit :func:`expand`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    DomainError,
    OracleFailure,
    ParameterError,
)

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tape:
    """Append-only record of operations."""

    __slots__ = ("_parents", "_backward")

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._backward: list[Backward | None] = []

    def __len__(self) -> int:
        return len(self._parents)

    def leaf(self, value, requires_grad: bool = True) -> "DiffValue":
        arr = np.array(value, dtype=np.float64)
        return self.record(arr, (), None, requires_grad=requires_grad)

    def const(self, value) -> "DiffValue":
        return self.leaf(value, requires_grad=False)

    def record(
        self,
        value: np.ndarray,
        parents: Sequence["DiffValue"],
        backward: Backward | None,
        requires_grad: bool | None = None,
    ) -> "DiffValue":
        """Append a node.  ``backward(g)`` returns one gradient per parent."""
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands live on different tapes")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        nid = len(self._parents)
        if requires_grad and parents:
            self._parents.append(tuple(p.id for p in parents))
            self._backward.append(backward)
        else:
            self._parents.append(())
            self._backward.append(None)
        return DiffValue(_frozen(np.asarray(value, dtype=np.float64)), self, nid, requires_grad)


class DiffValue:
    __slots__ = ("value", "tape", "id", "requires_grad")

    def __init__(self, value: np.ndarray, tape: Tape, nid: int, requires_grad: bool):
        self.value = value
        self.tape = tape
        self.id = nid
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "DiffValue":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"DiffValue(shape={self.shape}, id={self.id}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, DiffValue):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis: int | None = None) -> "DiffValue":
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None) -> "DiffValue":
        return reduce("mean", self, axis)


# -- helpers -----------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, DiffValue):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        raise ContractError("at least one operand must be a DiffValue")
    return tape


def _lift(x, tape: Tape) -> DiffValue:
    if isinstance(x, DiffValue):
        return x
    return tape.const(x)


def _binary_shape(a: DiffValue, b: DiffValue, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # general reduction, used by expand()
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> DiffValue:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _binary_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return tape.record(a.value + b.value, (a, b), bw)


def sub(a, b) -> DiffValue:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _binary_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return tape.record(a.value - b.value, (a, b), bw)


def mul(a, b) -> DiffValue:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _binary_shape(a, b, "mul")
    av, bv = a.value, b.value

    def bw(g):
        ga = _unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(av * bv, (a, b), bw)


def div(a, b) -> DiffValue:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _binary_shape(a, b, "div")
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv

    def bw(g):
        ga = _unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return tape.record(out, (a, b), bw)


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def neg(a: DiffValue) -> DiffValue:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def exp(a: DiffValue) -> DiffValue:
    out = np.exp(a.value)
    return a.tape.record(out, (a,), lambda g: (g * out,))


def log(a: DiffValue) -> DiffValue:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("log of nonpositive value")
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def square(a: DiffValue) -> DiffValue:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * g * av,))


def power(a: DiffValue, k: float) -> DiffValue:
    """``a ** k`` for a nonnegative base and constant exponent ``k >= 0``."""
    k = float(k)
    av = a.value
    if k < 0 or np.any(av < 0):
        raise DomainError("power needs a nonnegative base and exponent")
    if k == 0.0:
        return a.tape.record(np.ones_like(av), (a,), lambda g: (np.zeros_like(g),))

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = k * np.power(av, k - 1.0)
        # subgradient 0 at the base-zero kink when k < 1
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return a.tape.record(np.power(av, k), (a,), bw)


def sqrt(a: DiffValue) -> DiffValue:
    av = a.value
    if np.any(av <= 0):
        raise DomainError("sqrt needs a positive argument")
    out = np.sqrt(av)
    return a.tape.record(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a: DiffValue) -> DiffValue:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: DiffValue) -> DiffValue:
    av = a.value
    pos = av > 0
    return a.tape.record(np.where(pos, av, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "log": log,
    "exp": exp,
    "square": square,
    "neg": neg,
}


def elementwise(kind: str, *args) -> DiffValue:
    """Dispatch by name: add, sub, mul, scale, log, exp, square, neg."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> DiffValue:
    """Matrix product.  Supports 2-D @ 2-D, 3-D @ 3-D (same batch) and 3-D @ 2-D."""
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    ok = (
        av.ndim in (2, 3)
        and bv.ndim in (2, 3)
        and not (av.ndim == 2 and bv.ndim == 3)
        and av.shape[-1] == bv.shape[-2]
        and (av.ndim == 2 or bv.ndim == 2 or av.shape[0] == bv.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def bw(g):
        ga = g @ _swap(bv) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if av.ndim == 3 and bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(av) @ g
        return ga, gb

    return tape.record(av @ bv, (a, b), bw)


def dot(a, b) -> DiffValue:
    """Inner product of two equal-shape values."""
    return reduce("sum", mul(a, b))


def transpose(a: DiffValue) -> DiffValue:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {a.shape}")
    return a.tape.record(_swap(a.value), (a,), lambda g: (_swap(g),))


# -- softmax family ------------------------------------------------------------


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: DiffValue) -> DiffValue:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError("softmax_rows needs a nonempty last axis")
    s = _softmax(a.value)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return a.tape.record(s, (a,), bw)


def log_softmax_rows(a: DiffValue) -> DiffValue:
    x = a.value
    z = x - x.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return a.tape.record(out, (a,), bw)


# -- reductions and shape ops -----------------------------------------------------


def reduce(kind: str, a: DiffValue, axis: int | None = None) -> DiffValue:
    if kind not in ("sum", "mean"):
        raise ParameterError(f"unknown reduction {kind!r}")
    shape = a.shape
    if axis is not None:
        if not -len(shape) <= axis < len(shape):
            raise DimensionError(f"axis {axis} out of range for shape {shape}")
        axis = axis % len(shape)
    n = a.value.size if axis is None else shape[axis]
    out = a.value.sum(axis=axis)
    if kind == "mean":
        out = out / n
    factor = 1.0 / n if kind == "mean" else 1.0

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * factor, shape),)

    return a.tape.record(out, (a,), bw)


def reshape(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    orig = a.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def expand(a: DiffValue, shape: Sequence[int]) -> DiffValue:
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    orig = a.shape
    try:
        out = np.broadcast_to(a.value, tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot expand shape {orig} to {tuple(shape)}") from None
    return a.tape.record(out, (a,), lambda g: (_unbroadcast(g, orig),))


def concat(xs: Sequence[DiffValue], axis: int = 0) -> DiffValue:
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return tape.record(out, xs, bw)


def getitem(a: DiffValue, idx) -> DiffValue:
    """Basic (slice/integer) indexing."""
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return a.tape.record(a.value[idx], (a,), bw)


def embed(table: DiffValue, ids) -> DiffValue:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IndexError(f"embedding ids must lie in [0, {rows})")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (out,)

    return table.tape.record(table.value[ids], (table,), bw)


def pick(a: DiffValue, idx) -> DiffValue:
    """Select one entry per row along the last axis: ``out[...] = a[..., idx[...]]``."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != a.shape[:-1]:
        raise DimensionError(f"pick: index shape {idx.shape} does not match {a.shape[:-1]}")
    shape = a.shape
    out = np.take_along_axis(a.value, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return a.tape.record(out, (a,), bw)


def layer_norm(a: DiffValue, eps: float = 1e-5) -> DiffValue:
    """Parameter-free normalisation over the last axis."""
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return a.tape.record(y, (a,), bw)


def normalize_rows(a: DiffValue) -> DiffValue:
    """Scale each row (last axis) to unit L2 norm."""
    x = a.value
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalise a zero-norm row")
    y = x / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return a.tape.record(y, (a,), bw)


# -- backward ------------------------------------------------------------------


def backward(loss: DiffValue, params: Sequence[DiffValue]) -> list[np.ndarray]:
    """Return d(loss)/d(p) for every ``p`` in ``params``.

    Only nodes lying on a path from some requested parameter to ``loss`` are
    visited.  Parameters that do not influence the loss get a zero gradient.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    for p in params:
        if p.tape is not tape:
            raise ContractError("parameter lives on a different tape than the loss")
    wanted = {p.id for p in params if p.requires_grad and p.id <= loss.id}
    n = loss.id + 1
    parents = tape._parents
    fns = tape._backward

    relevant = bytearray(n)
    for i in range(n):
        if i in wanted:
            relevant[i] = 1
            continue
        for q in parents[i]:
            if relevant[q]:
                relevant[i] = 1
                break

    found: dict[int, np.ndarray] = {}
    if relevant[loss.id]:
        adj: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape)}
        for i in range(loss.id, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in wanted:
                found[i] = g
            fn = fns[i]
            if fn is None:
                continue
            ps = parents[i]
            for q, gq in zip(ps, fn(g)):
                if gq is None or not relevant[q]:
                    continue
                prev = adj.get(q)
                adj[q] = gq if prev is None else prev + gq
    return [np.array(found[p.id]) if p.id in found else np.zeros(p.shape) for p in params]


def custom_op(parents: Sequence[DiffValue], value, backward_fn: Backward) -> DiffValue:
    """Record a user-defined op.  Used by tests to inject faulty backward rules."""
    tape = _tape_of(*parents)
    return tape.record(np.asarray(value, dtype=np.float64), parents, backward_fn)


# -- finite-difference oracle ------------------------------------------------------


@dataclass
class ParamCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    max_rel_err: float


@dataclass
class GradientReport:
    checks: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def worst(self) -> str | None:
        if not self.checks:
            return None
        return max(self.checks, key=lambda c: c.max_rel_err).name

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def finite_diff_check(
    f: Callable[[dict[str, DiffValue]], DiffValue],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> GradientReport:
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f`` receives a dict of DiffValues keyed like ``params`` and must return a
    scalar DiffValue.  The numeric side only ever reads forward values.
    """
    if not h > 0:
        raise ParameterError("finite-difference step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in base.items()}
    out = f(leaves)
    grads = dict(zip(base, backward(out, list(leaves.values()))))

    def probe(arrays: dict[str, np.ndarray]) -> float:
        t = Tape()
        val = f({k: t.const(v) for k, v in arrays.items()}).value
        val = float(np.asarray(val).reshape(()))
        if not math.isfinite(val):
            raise OracleFailure(f"objective is non-finite ({val}) at probe point")
        return val

    probe(base)
    report = GradientReport()
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            shifted = dict(base)
            plus = arr.copy()
            plus[idx] += h
            minus = arr.copy()
            minus[idx] -= h
            shifted[name] = plus
            fp = probe(shifted)
            shifted[name] = minus
            fm = probe(shifted)
            numeric[idx] = (fp - fm) / (2.0 * h)
        err = float(relative_error(grads[name], numeric).max()) if arr.size else 0.0
        report.checks.append(ParamCheck(name, grads[name], numeric, err))
    return report
