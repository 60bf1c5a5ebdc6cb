"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` is a flat arena of nodes.  Each node stores its value and a
tuple of ``(parent_index, vjp)`` pairs, where ``vjp`` maps the node's adjoint
to the contribution for that parent.  Parents always have smaller indices
than children, so the arena order is already a topological order and
:meth:`Tape.backward` is a single reverse sweep.

The elementwise helpers (:func:`exp`, :func:`log`, :func:`tanh`, ...) accept
either plain ndarrays or :class:`Var` handles, so model code is written once
and runs untraced for evaluation or traced for training.

Example
-------
>>> tape = Tape()
>>> a, b = tape.var(2.0), tape.var(3.0)
>>> (a * b).backward()
>>> float(a.adjoint), float(b.adjoint)
(3.0, 2.0)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when an operation is traced outside its real domain."""


class Tape:
    """Append-only arena of traced nodes with watermark rollback."""

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.parents: list[tuple] = []
        self._adjoints: list[np.ndarray | None] = []

    def __len__(self) -> int:
        return len(self.values)

    def var(self, value) -> "Var":
        """Create a leaf.  ndarray inputs are stored by reference, not copied."""
        if not isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=np.float64)
        return self._record(value, ())

    def _record(self, value: np.ndarray, parents: tuple) -> "Var":
        self.values.append(value)
        self.parents.append(parents)
        self._adjoints.append(None)
        return Var(self, len(self.values) - 1)

    def watermark(self) -> int:
        return len(self.values)

    def rollback(self, mark: int) -> None:
        """Drop every node recorded after ``mark``; earlier nodes are untouched."""
        if mark > len(self.values):
            raise ValueError(f"watermark {mark} is beyond tape length {len(self.values)}")
        del self.values[mark:]
        del self.parents[mark:]
        del self._adjoints[mark:]
        for i in range(mark):
            self._adjoints[i] = None

    def adjoint(self, index: int) -> np.ndarray:
        g = self._adjoints[index]
        if g is None:
            return np.zeros_like(self.values[index])
        return g

    def backward(self, root: "Var") -> None:
        if root.tape is not self:
            raise ValueError("root belongs to a different tape")
        if np.size(root.value) != 1:
            raise ValueError(f"backward needs a scalar root, got shape {np.shape(root.value)}")
        adj: list = [None] * len(self.values)
        adj[root.index] = np.ones_like(self.values[root.index])
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for p, vjp in self.parents[i]:
                contrib = vjp(g)
                adj[p] = contrib if adj[p] is None else adj[p] + contrib
        self._adjoints = adj


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def value_of(x) -> np.ndarray:
    """The numeric value of a Var, or the input itself."""
    return x.value if isinstance(x, Var) else x


class Var:
    """Handle to a node on a :class:`Tape`."""

    __slots__ = ("tape", "index")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to our reflected ops

    def __init__(self, tape: Tape, index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def adjoint(self) -> np.ndarray:
        return self.tape.adjoint(self.index)

    @property
    def parents(self) -> tuple:
        return self.tape.parents[self.index]

    @property
    def shape(self) -> tuple:
        return np.shape(self.value)

    @property
    def ndim(self) -> int:
        return np.ndim(self.value)

    def __repr__(self) -> str:
        return f"Var(index={self.index}, value={self.value!r})"

    def __float__(self) -> float:
        return float(self.value)

    def backward(self) -> None:
        self.tape.backward(self)

    def _unary(self, value, local: Callable[[np.ndarray], np.ndarray]) -> "Var":
        return self.tape._record(value, ((self.index, local),))

    def _binary(self, other, value, da, db) -> "Var":
        parents = []
        if isinstance(self, Var):
            parents.append((self.index, da))
        if isinstance(other, Var):
            parents.append((other.index, db))
        tape = self.tape if isinstance(self, Var) else other.tape
        return tape._record(value, tuple(parents))

    # arithmetic ---------------------------------------------------------

    def __add__(self, other):
        a, b = self.value, value_of(other)
        out = a + b
        sa, sb = np.shape(a), np.shape(b)
        return Var._binary(
            self, other, out,
            lambda g: _unbroadcast(g, sa),
            lambda g: _unbroadcast(g, sb),
        )

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self.value, value_of(other)
        sa, sb = np.shape(a), np.shape(b)
        return Var._binary(
            self, other, a - b,
            lambda g: _unbroadcast(g, sa),
            lambda g: _unbroadcast(-g, sb),
        )

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self._unary(-self.value, lambda g: -g)

    def __mul__(self, other):
        a, b = self.value, value_of(other)
        sa, sb = np.shape(a), np.shape(b)
        return Var._binary(
            self, other, a * b,
            lambda g: _unbroadcast(g * b, sa),
            lambda g: _unbroadcast(g * a, sb),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self.value, value_of(other)
        if np.any(b == 0):
            raise DomainError("division by zero")
        sa, sb = np.shape(a), np.shape(b)
        out = a / b
        return Var._binary(
            self, other, out,
            lambda g: _unbroadcast(g / b, sa),
            lambda g: _unbroadcast(-g * out / b, sb),
        )

    def __rtruediv__(self, other):
        a = self.value
        if np.any(a == 0):
            raise DomainError("division by zero")
        out = value_of(other) / a
        return self._unary(out, lambda g: _unbroadcast(-g * out / a, np.shape(a)))

    def __pow__(self, p):
        if isinstance(p, Var):
            raise TypeError("only constant exponents are supported")
        a = self.value
        return self._unary(a**p, lambda g: g * p * a ** (p - 1))

    def __matmul__(self, other):
        a, b = self.value, value_of(other)
        return Var._binary(self, other, a @ b, lambda g: g @ b.T, lambda g: a.T @ g)

    def __rmatmul__(self, other):
        a, b = other, self.value
        return self._unary(a @ b, lambda g: a.T @ g)

    # structure ----------------------------------------------------------

    @property
    def T(self) -> "Var":
        return self._unary(self.value.T, lambda g: g.T)

    def __getitem__(self, key) -> "Var":
        a = self.value
        shape = a.shape

        def vjp(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        return self._unary(a[key], vjp)

    def reshape(self, *shape) -> "Var":
        old = self.shape
        return self._unary(self.value.reshape(*shape), lambda g: g.reshape(old))

    def sum(self, axis=None) -> "Var":
        a = self.value
        shape = a.shape

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return self._unary(np.sum(a, axis=axis), vjp)

    def mean(self, axis=None) -> "Var":
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)


# elementwise functions accepting Var or ndarray ---------------------------


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    out = np.exp(x.value)
    return x._unary(out, lambda g: g * out)


def log(x):
    a = value_of(x)
    if np.any(a <= 0):
        bad = np.asarray(a)[np.asarray(a) <= 0].ravel()[0]
        raise DomainError(f"log of non-positive value {bad!r}")
    if not isinstance(x, Var):
        return np.log(a)
    return x._unary(np.log(a), lambda g: g / a)


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    out = np.tanh(x.value)
    return x._unary(out, lambda g: g * (1.0 - out * out))


def absolute(x):
    """|x| with subgradient 0 at the kink."""
    if not isinstance(x, Var):
        return np.abs(x)
    a = x.value
    return x._unary(np.abs(a), lambda g: g * np.sign(a))


def where(cond: np.ndarray, x, y):
    """Select by a mask fixed at trace time; gradients follow the chosen branch."""
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, value_of(x), value_of(y))
    sx, sy = np.shape(value_of(x)), np.shape(value_of(y))
    return Var._binary(
        x, y, out,
        lambda g: _unbroadcast(np.where(cond, g, 0.0), sx),
        lambda g: _unbroadcast(np.where(cond, 0.0, g), sy),
    ) if isinstance(x, Var) or isinstance(y, Var) else out


def maximum(x, y):
    """max(x, y) with the branch chosen on the traced values (ties go to x)."""
    return where(value_of(x) >= value_of(y), x, y)


def concat(parts: Sequence, axis: int = -1):
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=axis)
    vars_ = [(i, p) for i, p in enumerate(parts) if isinstance(p, Var)]
    if not vars_:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def slicer(i):
        lo, hi = bounds[i], bounds[i + 1]
        return lambda g: np.take(g, np.arange(lo, hi), axis=axis)

    tape = vars_[0][1].tape
    return tape._record(out, tuple((p.index, slicer(i)) for i, p in vars_))


def inv(x):
    """Matrix inverse; d(A^-1) = -A^-1 dA A^-1."""
    if not isinstance(x, Var):
        return np.linalg.inv(x)
    out = np.linalg.inv(x.value)
    return x._unary(out, lambda g: -out.T @ g @ out.T)


def backward(root: Var) -> None:
    root.backward()


# finite-difference oracles ------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (f(theta + step) - f(theta - step)) / (2.0 * h)
    return grad


def numerical_jacobian(g: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian; row i holds the partials of g_i."""
    x = np.array(x, dtype=np.float64)
    cols = []
    for j in range(x.size):
        step = np.zeros_like(x)
        step[j] = h
        cols.append((np.asarray(g(x + step)) - np.asarray(g(x - step))) / (2.0 * h))
    return np.stack(cols, axis=1)
