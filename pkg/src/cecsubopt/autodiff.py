"""Forward-mode automatic differentiation with first- and second-order duals.

Both dual types carry their parts as floats or numpy arrays, so a single
evaluation can propagate derivatives for a whole batch of nodes at once.
Model code stays generic by using the module-level :func:`sqrt` instead of
``np.sqrt`` and plain operators for everything else.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "DomainError",
    "Dual1",
    "Dual2",
    "sqrt",
    "value_of",
    "clamp",
    "gradient",
    "directional_second",
    "hessian_vector",
]


class DomainError(ArithmeticError):
    """Raised on sqrt of a negative number or division by zero."""


def _check_divisor(v):
    if np.any(np.asarray(v) == 0):
        raise DomainError("division by zero")


def _check_sqrt(v):
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of negative argument")


class _DualBase:
    # make ndarray (op) Dual dispatch to the Dual reflected operator
    __array_ufunc__ = None

    def _parts(self):
        raise NotImplementedError

    @classmethod
    def _make(cls, parts):
        return cls(*parts)

    def _lift(self, other):
        if isinstance(other, type(self)):
            return other
        if isinstance(other, _DualBase):
            raise TypeError(f"cannot mix {type(self).__name__} and {type(other).__name__}")
        zero = np.zeros_like(np.asarray(other, dtype=float))
        return self._constant(other, zero)

    @property
    def value(self):
        return self._parts()[0]

    @property
    def shape(self):
        return np.shape(self.value)

    def __len__(self):
        return len(self.value)

    def __getitem__(self, idx):
        return self._make(p[idx] for p in self._parts())

    def reshape(self, *shape):
        return self._make(np.reshape(p, *shape) if len(shape) == 1 else np.reshape(p, shape)
                          for p in self._parts())

    def sum(self, axis=None):
        return self._make(np.sum(p, axis=axis) for p in self._parts())

    def __matmul__(self, mat):
        return self._make(np.asarray(p) @ mat for p in self._parts())

    def __rmatmul__(self, mat):
        return self._make(mat @ np.asarray(p) for p in self._parts())

    def __add__(self, other):
        o = self._lift(other)
        return self._make(a + b for a, b in zip(self._parts(), o._parts()))

    __radd__ = __add__

    def __neg__(self):
        return self._make(-p for p in self._parts())

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) - self

    def __truediv__(self, other):
        if isinstance(other, _DualBase):
            return self * other._reciprocal()
        _check_divisor(other)
        return self._make(p / other for p in self._parts())

    def __rtruediv__(self, other):
        return self._reciprocal() * other

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        if n == 0:
            return self._lift(np.ones_like(np.asarray(self.value, dtype=float)))
        if n < 0:
            return (self ** (-n))._reciprocal()
        v = self.value
        return self._chain(v ** n, n * v ** (n - 1), n * (n - 1) * v ** (n - 2) if n > 1 else 0.0 * v)

    def sqrt(self):
        v = self.value
        _check_sqrt(v)
        s = np.sqrt(v)
        if np.any(s == 0):
            raise DomainError("derivative of sqrt at zero")
        return self._chain(s, 0.5 / s, -0.25 / (s * v))

    def _reciprocal(self):
        v = self.value
        _check_divisor(v)
        inv = 1.0 / v
        return self._chain(inv, -inv * inv, 2.0 * inv * inv * inv)

    def __repr__(self):
        inner = ", ".join(repr(p) for p in self._parts())
        return f"{type(self).__name__}({inner})"


class Dual1(_DualBase):
    """Value plus a directional first derivative."""

    __slots__ = ("val", "deriv")

    def __init__(self, value, deriv=0.0):
        self.val = value
        self.deriv = deriv

    def _parts(self):
        return (self.val, self.deriv)

    @classmethod
    def _constant(cls, v, zero):
        return cls(v, zero)

    def _chain(self, g0, g1, g2):
        return Dual1(g0, g1 * self.deriv)

    def __mul__(self, other):
        if not isinstance(other, _DualBase):
            return Dual1(self.val * other, self.deriv * other)
        o = self._lift(other)
        return Dual1(self.val * o.val, self.deriv * o.val + self.val * o.deriv)

    __rmul__ = __mul__


class Dual2(_DualBase):
    """Value, first and second derivative along a single direction."""

    __slots__ = ("val", "d1", "d2")

    def __init__(self, value, d1=0.0, d2=0.0):
        self.val = value
        self.d1 = d1
        self.d2 = d2

    def _parts(self):
        return (self.val, self.d1, self.d2)

    @classmethod
    def _constant(cls, v, zero):
        return cls(v, zero, zero)

    def _chain(self, g0, g1, g2):
        return Dual2(g0, g1 * self.d1, g2 * self.d1 * self.d1 + g1 * self.d2)

    def __mul__(self, other):
        if not isinstance(other, _DualBase):
            return Dual2(self.val * other, self.d1 * other, self.d2 * other)
        o = self._lift(other)
        return Dual2(
            self.val * o.val,
            self.d1 * o.val + self.val * o.d1,
            self.d2 * o.val + 2.0 * self.d1 * o.d1 + self.val * o.d2,
        )

    __rmul__ = __mul__


def sqrt(x):
    """Square root that works on floats, arrays and duals."""
    if isinstance(x, _DualBase):
        return x.sqrt()
    _check_sqrt(x)
    return np.sqrt(x)


def clamp(x, lo, hi):
    """Clip ``x`` to ``[lo, hi]``; derivatives vanish where clipping is active."""
    if not isinstance(x, _DualBase):
        return np.clip(x, lo, hi)
    v = x.value
    inside = (v >= lo) & (v <= hi)
    parts = [np.clip(v, lo, hi)] + [np.where(inside, p, 0.0) for p in x._parts()[1:]]
    return x._make(parts)


def value_of(x):
    """Strip derivative parts, returning the primal value."""
    return x.value if isinstance(x, _DualBase) else x


def gradient(f, x) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` using one forward pass per coordinate."""
    x = np.asarray(x, dtype=float)
    n = x.size
    g = np.empty(n)
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = 1.0
        out = f(Dual1(x.copy(), seed.reshape(x.shape)))
        g[i] = out.deriv if isinstance(out, Dual1) else 0.0
    return g.reshape(x.shape)


def directional_second(f, x, v) -> float:
    """Return ``v^T H v`` for the Hessian ``H`` of ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    out = f(Dual2(x.copy(), np.asarray(v, dtype=float).reshape(x.shape), np.zeros_like(x)))
    return out.d2 if isinstance(out, Dual2) else 0.0


def hessian_vector(f, x, v) -> np.ndarray:
    """Hessian-vector product by polarization of directional second derivatives.

    ``(Hv)_i = (D2(e_i + v) - D2(e_i) - D2(v)) / 2`` where ``D2(d) = d^T H d``.
    Only single-direction Dual2 sweeps are used; the Hessian is never formed.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float).reshape(-1)
    n = x.size
    dvv = directional_second(f, x, v)
    hv = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        hv[i] = 0.5 * (directional_second(f, x, e + v) - directional_second(f, x, e) - dvv)
    return hv.reshape(x.shape)
