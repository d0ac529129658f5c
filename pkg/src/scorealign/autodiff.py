"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation whose inputs include an attached
:class:`Tensor`. Tensors built from plain arrays (or produced by
:func:`detach`) carry no node and never receive gradient, which is how
stop-gradient is expressed throughout the package.

Broadcasting follows numpy's trailing-axis rules for the elementwise ops
(``add``, ``sub``, ``mul``, ``div``). ``matmul`` accepts ``(n, k) @ (k, m)``
and ``(k,) @ (k, m)``. Reductions take an ``axis`` argument and ``keepdims``.
Nothing else broadcasts.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "StaleTapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "detach",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "transpose",
    "sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "log",
    "softplus",
    "tanh",
    "dot",
    "concat",
    "take",
    "logsumexp",
    "custom",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class StaleTapeError(RuntimeError):
    """``backward`` was called twice on the same tape."""


Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Append-only record of operations. One backward pass per tape."""

    def __init__(self) -> None:
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Vjp | None] = []
        self._kinds: list[str] = []
        self._shapes: list[tuple[int, ...]] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self._kinds)

    def watch(self, value, name: str = "leaf") -> Tensor:
        """Register ``value`` as a differentiable leaf and return it attached."""
        if self._grads is not None:
            raise StaleTapeError("cannot watch on a tape that has already run backward")
        arr = np.array(value, dtype=np.float64)
        return Tensor(arr, self, self._push(name, (), None, arr.shape))

    def watch_all(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {k: self.watch(v, k) for k, v in params.items()}

    def _push(self, kind: str, parents: tuple[int, ...], vjp: Vjp | None, shape) -> int:
        self._kinds.append(kind)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(tuple(shape))
        return len(self._kinds) - 1

    def backward(self, loss: Tensor) -> None:
        if self._grads is not None:
            raise StaleTapeError("backward already ran on this tape; build a new tape per step")
        if loss.tape is not self:
            raise ValueError("loss is not attached to this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._kinds)
        grads[loss.node] = np.ones_like(loss.value)
        for i in range(loss.node, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for p, gp in zip(self._parents[i], vjp(g)):
                if p < 0 or gp is None:
                    continue
                if grads[p] is None:
                    grads[p] = np.array(gp, dtype=np.float64, copy=True)
                else:
                    grads[p] = grads[p] + gp
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray | None:
        """Gradient of the last backward's loss w.r.t. ``t``.

        ``None`` for detached tensors. Attached tensors that the loss does
        not depend on get zeros.
        """
        if self._grads is None:
            raise RuntimeError("backward has not run on this tape")
        if t.tape is not self:
            return None
        g = self._grads[t.node]
        return np.zeros(t.shape) if g is None else g

    def grads(self, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        return {k: self.grad(v) for k, v in params.items()}


class Tensor:
    """Array value, optionally attached to a tape node."""

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape | None = None, node: int = -1) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def attached(self) -> bool:
        return self.tape is not None

    def __repr__(self) -> str:
        tag = f"node={self.node}" if self.attached else "detached"
        return f"Tensor({self.value!r}, {tag})"

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).value)


def _record(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{kind}: operands live on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    if tape._grads is not None:
        raise StaleTapeError(f"{kind}: tape already ran backward")
    parents = tuple(t.node if t.tape is tape else -1 for t in inputs)
    return Tensor(value, tape, tape._push(kind, parents, vjp, value.shape))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    av, bv = a.value, b.value
    return _record(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _record(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    av, bv = a.value, b.value

    def vjp(g):
        if av.ndim == 1:
            return g @ bv.T, np.outer(av, g)
        return g @ bv.T, av.T @ g

    return _record("matmul", av @ bv, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as a single node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: shapes {x.shape}, {w.shape}, {b.shape} are not aligned")
    xv, wv = x.value, w.value
    x2 = xv.reshape(-1, xv.shape[-1])

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        return (g @ wv.T, x2.T @ g2, g2.sum(axis=0))

    return _record("affine", xv @ wv + b.value, (x, w, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", a.value.T, (a,), lambda g: (g.T,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("square", av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return _record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _record("softplus", out, (a,), lambda g: (g * _sigmoid(av),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def dot(a, b) -> Tensor:
    """Inner product over the last axis: ``(n, d), (n, d) -> (n,)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    return sum(mul(a, b), axis=-1)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[p.shape for p in parts]} do not stack") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _record("concat", out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(table, idx) -> Tensor:
    """Row lookup ``table[idx]``; gradient scatters back with accumulation."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    shape = table.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record("take", table.value[idx], (table,), vjp)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    av = a.value
    m = np.max(av, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    soft = np.exp(av - s)
    return _record("logsumexp", np.squeeze(s, axis=axis), (a,), lambda g: (np.expand_dims(g, axis) * soft,))


def custom(kind: str, value: np.ndarray, inputs: Sequence, vjp: Vjp) -> Tensor:
    """Record an op whose value and vector-Jacobian product are supplied by the caller."""
    return _record(kind, np.asarray(value, dtype=np.float64), [as_tensor(t) for t in inputs], vjp)
