"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to :class:`Tensor` values in
creation order; :meth:`Tape.gradient` walks it backwards once. Plain numpy
arrays mixed into an expression are constants, and every op in this module
also accepts bare arrays (returning bare arrays), so model code can be written
once and run either on the fast numpy path or on the tape.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a forward pass produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def variable(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(np.array(value, dtype=np.float64), tape=self, name=name)
        return t

    def gradient(self, output: "Tensor", wrt):
        """Gradient of a scalar ``output`` w.r.t. tensors in ``wrt``.

        ``wrt`` may be a single Tensor, a sequence, or a name -> Tensor mapping;
        the result has the same structure. Unused inputs get zero gradients.
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.data.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        stop = output._index
        for node in reversed(self.nodes[: stop + 1]):
            g = grads.pop(id(node), None)
            if g is None or node._vjp is None:
                if g is not None:
                    grads[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not isinstance(parent, Tensor):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        def lookup(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            return np.zeros_like(t.data) if g is None else np.asarray(g).reshape(t.shape)

        if isinstance(wrt, Tensor):
            return lookup(wrt)
        if isinstance(wrt, Mapping):
            return ParameterVector((k, lookup(v)) for k, v in wrt.items())
        return [lookup(t) for t in wrt]


class Tensor:
    __slots__ = ("data", "tape", "name", "_parents", "_vjp", "_index")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, tape: Tape, parents=(), vjp=None, name=None):
        self.data = data
        self.tape = tape
        self.name = name
        self._parents = parents
        self._vjp = vjp
        self._index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

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

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only square is supported")

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    @property
    def T(self):
        return transpose(self)


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is not None and x.tape is not tape:
                raise ValueError("mixing tensors from different tapes")
            tape = x.tape
    return tape


def _make(data, parents, vjp, tape) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value in forward pass")
    return Tensor(data, tape, parents, vjp)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_shapes(a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError as exc:
        raise ShapeError(f"incompatible shapes {np.shape(a)} and {np.shape(b)}") from exc


# --- primitives --------------------------------------------------------------


def add(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _binary_shapes(av, bv)
    out = av + bv
    if tape is None:
        return out
    sa, sb = av.shape, bv.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), tape)


def neg(a):
    if not isinstance(a, Tensor):
        return -np.asarray(a)
    return _make(-a.data, (a,), lambda g: (-g,), a.tape)


def mul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _binary_shapes(av, bv)
    out = av * bv
    if tape is None:
        return out
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        tape,
    )


def div(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    _binary_shapes(av, bv)
    out = av / bv
    if tape is None:
        return out
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
        tape,
    )


def square(a):
    av = value(a)
    out = av * av
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (2.0 * av * g,), a.tape)


def matmul(a, b):
    tape = _tape_of(a, b)
    av, bv = value(a), value(b)
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0 if bv.ndim == 1 else -2]:
        raise ShapeError(f"matmul shapes {av.shape} and {bv.shape}")
    out = av @ bv
    if tape is None:
        return out

    def vjp(g):
        if bv.ndim == 1:
            ga = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
            gb = av.T @ g if av.ndim > 1 else g * av
        elif av.ndim == 1:
            ga = bv @ g
            gb = np.outer(av, g)
        else:
            ga = g @ bv.T
            gb = av.T @ g
        return ga, gb

    return _make(out, (a, b), vjp, tape)


def total(a, axis=None, keepdims=False):
    """Sum over ``axis`` (named to avoid shadowing the builtin)."""
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not isinstance(a, Tensor):
        return out
    shape = av.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, a.tape)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(total(a, axis, keepdims), 1.0 / n)


def exp(a):
    av = value(a)
    out = np.exp(av)
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g * out,), a.tape)


def log(a):
    av = value(a)
    if np.any(av <= 0):
        raise NonFiniteError("log of non-positive value")
    out = np.log(av)
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g / av,), a.tape)


def tanh(a):
    av = value(a)
    out = np.tanh(av)
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), a.tape)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    av = value(a)
    out = _sig(av)
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), a.tape)


def swish(a):
    av = value(a)
    s = _sig(av)
    out = av * s
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), a.tape)


def swish_grad(a):
    """Derivative of swish, itself differentiable (used for input-gradient graphs)."""
    av = value(a)
    s = _sig(av)
    out = s * (1.0 + av * (1.0 - s))
    if not isinstance(a, Tensor):
        return out

    def vjp(g):
        # d/dx [s + x s (1-s)] = s(1-s) (2 + x (1 - 2s))
        return (g * s * (1.0 - s) * (2.0 + av * (1.0 - 2.0 * s)),)

    return _make(out, (a,), vjp, a.tape)


def swish_grad2(x):
    """Second derivative of swish (numpy only, for forward-mode tangents)."""
    s = _sig(x)
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def concatenate(xs, axis=-1):
    xs = list(xs)
    tape = _tape_of(*xs)
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if tape is None:
        return out
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(xs), vjp, tape)


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    if not isinstance(a, Tensor):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), vjp, a.tape)


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (g.reshape(av.shape),), a.tape)


def transpose(a):
    av = value(a)
    if not isinstance(a, Tensor):
        return av.T
    return _make(av.T, (a,), lambda g: (g.T,), a.tape)


def broadcast_to(a, shape):
    av = value(a)
    out = np.broadcast_to(av, shape).copy()
    if not isinstance(a, Tensor):
        return out
    return _make(out, (a,), lambda g: (_unbroadcast(g, av.shape),), a.tape)


def logsumexp(a, axis=-1, keepdims=False):
    """Max-stabilised log-sum-exp; the max shift is treated as a constant."""
    m = np.max(value(a), axis=axis, keepdims=True)
    out = add(log(total(exp(add(a, -m)), axis=axis, keepdims=True)), m)
    if keepdims:
        return out
    return reshape(out, np.squeeze(m, axis=axis).shape)


def log_softmax(a, axis=-1):
    return add(a, neg(logsumexp(a, axis=axis, keepdims=True)))


# --- parameters --------------------------------------------------------------


class ParameterVector(OrderedDict):
    """Ordered name -> float64 array mapping with flatten/unflatten."""

    def __init__(self, items=()):
        super().__init__()
        for k, v in (items.items() if isinstance(items, Mapping) else items):
            if k in self:
                raise KeyError(f"duplicate parameter name {k!r}")
            self[k] = np.asarray(v, dtype=np.float64)

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))

    def flatten(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def unflatten(self, flat: np.ndarray) -> "ParameterVector":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ShapeError(f"expected {self.size} values, got {flat.size}")
        out, off = [], 0
        for k, v in self.items():
            out.append((k, flat[off : off + v.size].reshape(v.shape).copy()))
            off += v.size
        return ParameterVector(out)

    def copy(self) -> "ParameterVector":
        return ParameterVector((k, v.copy()) for k, v in self.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterVector":
        return ParameterVector((k, fn(v)) for k, v in self.items())

    def zeros_like(self) -> "ParameterVector":
        return self.map(np.zeros_like)

    def prefixed(self, prefix: str) -> "ParameterVector":
        return ParameterVector((prefix + k, v) for k, v in self.items())

    def select(self, prefix: str) -> "ParameterVector":
        return ParameterVector((k[len(prefix):], v) for k, v in self.items() if k.startswith(prefix))


def forward(graph: Callable[[Mapping[str, Tensor]], Tensor], inputs: ParameterVector):
    """Evaluate ``graph`` on freshly taped copies of ``inputs``.

    Returns ``(output, tape, bound)`` where ``bound`` maps names to the tape
    variables, ready for :meth:`Tape.gradient`.
    """
    tape = Tape()
    bound = OrderedDict((k, tape.variable(v, name=k)) for k, v in inputs.items())
    return graph(bound), tape, bound


def gradient(tape: Tape, output: Tensor, wrt: Mapping[str, Tensor]) -> ParameterVector:
    return tape.gradient(output, wrt)


def value_and_grad(fn: Callable[[Mapping[str, Tensor]], Tensor], params: ParameterVector):
    out, tape, bound = forward(fn, params)
    if not isinstance(out, Tensor):
        # output does not depend on any parameter
        return float(np.asarray(out)), params.zeros_like()
    return float(out.data), tape.gradient(out, bound)


def finite_difference_check(
    f: Callable[[ParameterVector], float],
    p: ParameterVector,
    step: float = 1e-5,
    grad: ParameterVector | None = None,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between central differences of ``f`` and its tape gradient.

    ``f`` must accept either a ParameterVector of arrays or of Tensors. When
    ``coords`` is given only those flat coordinates are probed. Components
    far below the largest one (e.g. structurally zero) are measured against
    ``1e-3 * max|g|`` so difference roundoff does not dominate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if grad is None:
        _, grad = value_and_grad(lambda q: f(q), p)
    g = grad.flatten()
    x0 = p.flatten()
    idx = range(x0.size) if coords is None else coords
    floor = 1e-3 * float(np.max(np.abs(g))) if g.size else 0.0
    worst = 0.0
    for i in idx:
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        fd = (float(value(f(p.unflatten(xp)))) - float(value(f(p.unflatten(xm))))) / (2 * step)
        worst = max(worst, abs(fd - g[i]) / max(abs(g[i]), floor, 1e-12))
    return worst
