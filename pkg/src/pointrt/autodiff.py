"""A small reverse-mode automatic differentiation tape over numpy arrays.

Values may be real or complex. For a real loss ``L`` the gradient stored on a
complex node ``z`` is ``dL/dRe(z) + 1j * dL/dIm(z)``; under that convention a
holomorphic op ``w = f(z)`` propagates ``g_z = conj(f'(z)) * g_w`` and a real
parent simply keeps the real part of what it receives.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Var:
    """A node on the tape holding an array value and, after ``backward``, its gradient."""

    __slots__ = ("value", "grad", "parents", "constant")
    __array_ufunc__ = None  # make numpy defer to our operators

    def __init__(self, value, parents=(), constant=False):
        self.value = np.asarray(value)
        if self.value.dtype.kind not in "fc":
            self.value = self.value.astype(np.float64)
        self.grad = None
        # (parent, vjp) pairs; vjp maps the upstream gradient to the parent's contribution.
        # Constants never receive gradients, so edges into them are dropped here.
        live = tuple(pv for pv in parents if not pv[0].constant)
        self.parents = live
        self.constant = constant or (bool(parents) and not live)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_complex(self) -> bool:
        return self.value.dtype.kind == "c"

    def __repr__(self):
        return f"Var({self.value!r})"

    # ---- arithmetic
    def __add__(self, other):
        other = _lift(other)
        return Var(self.value + other.value, ((self, lambda g: g), (other, lambda g: g)))

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other)
        return Var(self.value - other.value, ((self, lambda g: g), (other, lambda g: -g)))

    def __rsub__(self, other):
        return _lift(other) - self

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __mul__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        return Var(a * b, ((self, lambda g: g * np.conj(b)), (other, lambda g: g * np.conj(a))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        a, b = self.value, other.value
        out = a / b
        return Var(out, ((self, lambda g: g / np.conj(b)), (other, lambda g: -g * np.conj(out / b))))

    def __rtruediv__(self, other):
        return _lift(other) / self

    def __getitem__(self, idx):
        shape = self.value.shape

        def vjp(g):
            out = np.zeros(shape, dtype=g.dtype)
            np.add.at(out, idx, g)
            return out

        return Var(self.value[idx], ((self, vjp),))

    # ---- reverse pass
    def backward(self, seed=None):
        """Accumulate gradients of this (usually scalar, real) node into every ancestor."""
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=self.value.dtype)
        for node in reversed(order):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = _unbroadcast(np.asarray(vjp(g)), parent.value.shape)
                if not parent.is_complex:
                    contrib = contrib.real
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def _lift(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x), constant=True)


def const(x) -> Var:
    return Var(np.asarray(x), constant=True)


def value(x):
    return x.value if isinstance(x, Var) else np.asarray(x)


# ---- elementwise functions


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return Var(out, ((x, lambda g: g * np.conj(out)),))


def log(x: Var) -> Var:
    v = x.value
    return Var(np.log(v), ((x, lambda g: g / np.conj(v)),))


def sqrt(x: Var) -> Var:
    """Principal square root (non-negative real part)."""
    out = np.sqrt(x.value)
    return Var(out, ((x, lambda g: g / (2.0 * np.conj(out))),))


def abs2(x: Var) -> Var:
    v = x.value
    return Var((v * np.conj(v)).real, ((x, lambda g: 2.0 * g * v),))


def conj(x: Var) -> Var:
    return Var(np.conj(x.value), ((x, lambda g: np.conj(g)),))


def real(x: Var) -> Var:
    return Var(np.real(x.value), ((x, lambda g: g.astype(x.value.dtype)),))


def imag(x: Var) -> Var:
    return Var(np.imag(x.value), ((x, lambda g: 1j * g),))


def softplus(x: Var) -> Var:
    v = x.value
    return Var(np.logaddexp(0.0, v), ((x, lambda g: g / (1.0 + np.exp(-v))),))


def sigmoid(x: Var) -> Var:
    out = np.exp(-np.logaddexp(0.0, -x.value))  # overflow-free form
    return Var(out, ((x, lambda g: g * out * (1.0 - out)),))


# ---- shape and reduction


def reshape(x: Var, shape) -> Var:
    old = x.value.shape
    return Var(x.value.reshape(shape), ((x, lambda g: g.reshape(old)),))


def sum(x: Var, axis=None) -> Var:  # noqa: A001 - mirrors numpy naming
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape)
        return np.broadcast_to(np.expand_dims(g, axis), shape)

    return Var(x.value.sum(axis=axis), ((x, vjp),))


def take(x: Var, idx, axis: int = 0) -> Var:
    idx = np.asarray(idx)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return out

    return Var(np.take(x.value, idx, axis=axis), ((x, vjp),))


def stack(xs: list[Var], axis: int = 0) -> Var:
    xs = [_lift(x) for x in xs]
    parents = tuple((x, (lambda i: lambda g: np.take(g, i, axis=axis))(i)) for i, x in enumerate(xs))
    return Var(np.stack([x.value for x in xs], axis=axis), parents)


def where(mask, a, b) -> Var:
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, bool)
    return Var(np.where(mask, a.value, b.value),
               ((a, lambda g: np.where(mask, g, 0)), (b, lambda g: np.where(mask, 0, g))))


# ---- linear maps by constants


def matmul(A, x: Var) -> Var:
    """``A @ x`` for a constant matrix ``A``."""
    A = np.asarray(A)
    return Var(A @ x.value, ((x, lambda g: np.conj(A.T @ np.conj(g))),))


def ifft(x: Var, axis: int = -1) -> Var:
    n = x.value.shape[axis]
    return Var(np.fft.ifft(x.value, axis=axis), ((x, lambda g: np.fft.fft(g, axis=axis) / n),))


def grad_of(fn, *args):
    """Evaluate ``fn`` on fresh leaves built from ``args`` and return (value, gradients)."""
    leaves = [Var(np.array(a, copy=True)) for a in args]
    out = fn(*leaves)
    out.backward()
    return out.value, [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
