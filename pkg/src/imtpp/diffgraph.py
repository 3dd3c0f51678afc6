"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded on it;
:func:`backward` replays the tape in reverse and accumulates gradients into
every tensor that requires them. Outside a tape the same functions are plain
numpy computations, which is how inference runs.

All primitives broadcast like numpy. Leading batch dimensions are the norm in
this package: a hidden state is ``(batch, dim)`` and a weight ``(in, out)``.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "Tape", "ShapeError", "NumericDomainError", "NotOnTapeError",
    "tensor", "constant", "backward", "sgd_step",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "matvec", "square",
    "tanh", "exp", "expm1", "log", "softplus", "relu", "sigmoid",
    "softmax", "log_softmax", "concat", "take", "pick", "where", "clip",
    "maximum", "sum", "mean", "reshape", "ndtr", "log_ndtr", "ndtri", "norm_pdf",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NumericDomainError(ArithmeticError):
    """An argument lies outside the open domain of a primitive."""


class NotOnTapeError(RuntimeError):
    """The loss handed to :func:`backward` was not produced on the tape."""


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def _active() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_leaf", "_tape")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True
        self._tape = None
        # leaves own a zeroed gradient slot; intermediates get one on demand
        self.grad = np.zeros_like(self.value) if requires_grad else None

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)


class Tape:
    """Ordered record of the operations executed inside a ``with`` block."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def tensor(value, requires_grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=requires_grad, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out._leaf = False
    out.grad = None
    tape = _active()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = req
    out._tape = None
    if req:
        out._tape = tape
        tape.nodes.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.value, b.value)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(_binary(np.add, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make(_binary(np.subtract, a, b), (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _make(_binary(np.multiply, a, b), (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if np.any(b.value == 0.0):
        raise NumericDomainError("division by zero")
    av, bv = a.value, b.value
    out = _binary(np.divide, a, b)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None))


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    return _make(a.value * c, (a,), lambda g: (g * c,))


def square(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * g * av,))


def matmul(a, b) -> Tensor:
    """``a @ b`` for 1-D or 2-D operands (vector-matrix, matrix-matrix, ...)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul needs 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def bw(g):
        ga = gb = None
        if av.ndim == 2 and bv.ndim == 2:
            ga = g @ bv.T if a.requires_grad else None
            gb = av.T @ g if b.requires_grad else None
        elif av.ndim == 1 and bv.ndim == 2:
            ga = bv @ g if a.requires_grad else None
            gb = np.outer(av, g) if b.requires_grad else None
        elif av.ndim == 2:
            ga = np.outer(g, bv) if a.requires_grad else None
            gb = av.T @ g if b.requires_grad else None
        else:
            ga = g * bv if a.requires_grad else None
            gb = g * av if b.requires_grad else None
        return ga, gb

    return _make(av @ bv, (a, b), bw)


def matvec(w, x) -> Tensor:
    """Apply weight matrix ``w`` of shape (out, in) to vector(s) ``x`` (..., in)."""
    w, x = _wrap(w), _wrap(x)
    return matmul(x, _transpose(w))


def _transpose(a: Tensor) -> Tensor:
    return _make(a.value.T, (a,), lambda g: (g.T,))


# -- elementwise nonlinearities -----------------------------------------------

def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def expm1(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _make(np.expm1(av), (a,), lambda g: (g * np.exp(av),))


def log(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    if np.any(av <= 0.0):
        raise NumericDomainError("log of a non-positive value")
    return _make(np.log(av), (a,), lambda g: (g / av,))


def softplus(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    return _make(np.logaddexp(0.0, av), (a,), lambda g: (g * special.expit(av),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = special.expit(a.value)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is taken as 1."""
    a = _wrap(a)
    mask = a.value >= 0.0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _wrap(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, floor: float) -> Tensor:
    a = _wrap(a)
    mask = a.value >= floor
    return _make(np.maximum(a.value, floor), (a,), lambda g: (g * mask,))


# -- reductions and shape -------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(a.value.sum(axis=axis)), (a,), bw)


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = tuple(_wrap(p) for p in parts)
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def take(a, index) -> Tensor:
    """``a[index]`` with numpy indexing semantics (rows of an embedding table, columns, ...)."""
    a = _wrap(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.asarray(a.value[index]), (a,), bw)


def pick(a, idx) -> Tensor:
    """Select ``a[i, idx[i]]`` for each row ``i`` of a 2-D tensor."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.shape[0])
    return take(a, (rows, idx))


def where(cond, a, b) -> Tensor:
    """Elementwise ``a if cond else b``; ``cond`` is a constant boolean array."""
    a, b = _wrap(a), _wrap(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.value, b.value)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa) if a.requires_grad else None,
                            _unbroadcast(np.where(cond, 0.0, g), sb) if b.requires_grad else None))


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# -- standard normal ------------------------------------------------------------

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def norm_pdf(a) -> Tensor:
    a = _wrap(a)
    av = a.value
    out = _phi(av)
    return _make(out, (a,), lambda g: (-g * av * out,))


def ndtr(a) -> Tensor:
    """Standard normal CDF."""
    a = _wrap(a)
    av = a.value
    return _make(special.ndtr(av), (a,), lambda g: (g * _phi(av),))


def log_ndtr(a) -> Tensor:
    """log of the standard normal CDF, accurate deep into the lower tail."""
    a = _wrap(a)
    av = a.value
    out = special.log_ndtr(av)
    # d/dx log Phi(x) = phi(x) / Phi(x), evaluated in log space
    return _make(out, (a,), lambda g: (g * np.exp(-0.5 * av * av - out) * _INV_SQRT_2PI,))


# Acklam's rational approximation to the normal quantile (relative error
# below 1.15e-9 on (0, 1)), followed by one Halley step against the exact
# CDF, which brings the absolute error to the level of double rounding.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _ndtri_values(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    x = np.empty_like(p)
    lo = p < _P_LOW
    hi = p > 1.0 - _P_LOW
    mid = ~(lo | hi)
    if np.any(lo):
        q = np.sqrt(-2.0 * np.log(p[lo]))
        x[lo] = ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                 / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if np.any(hi):
        q = np.sqrt(-2.0 * np.log1p(-p[hi]))
        x[hi] = -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                  / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if np.any(mid):
        q = p[mid] - 0.5
        r = q * q
        x[mid] = ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
                  / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))
    # Halley refinement; the residual uses the complementary tail to keep precision
    upper = x > 0.0
    err = np.where(upper, (1.0 - p) - special.ndtr(-x), special.ndtr(x) - p)
    u = err * math.sqrt(2.0 * math.pi) * np.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def ndtri(a) -> Tensor:
    """Inverse standard normal CDF on the open interval (0, 1)."""
    a = _wrap(a)
    av = a.value
    if np.any((av <= 0.0) | (av >= 1.0)):
        raise NumericDomainError("inverse normal CDF needs arguments in (0, 1)")
    out = _ndtri_values(av)
    return _make(out, (a,), lambda g: (g / _phi(out),))


# -- reverse pass and optimizer -------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor on ``tape`` that feeds ``loss``."""
    if loss.value.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._tape is not tape:
        raise NotOnTapeError("loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.value)
    for out, inputs, fn in reversed(tape.nodes):
        g = out.grad
        if g is None:
            continue
        grads = fn(g)
        for inp, gi in zip(inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad += gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64, copy=True)
            else:
                inp.grad = inp.grad + gi
        out.grad = None


def global_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        total += float(np.vdot(p.grad, p.grad))
    return math.sqrt(total)


def sgd_step(params: Iterable[Tensor], lr: float, l2: float = 0.0,
             clip_norm: float | None = None) -> bool:
    """One plain SGD update ``p <- p - lr * (grad + l2 * p)``; gradients are zeroed.

    Returns False (and leaves values untouched) when any gradient is non-finite.
    """
    params = list(params)
    norm = global_grad_norm(params)
    ok = math.isfinite(norm)
    if ok:
        factor = 1.0
        if clip_norm is not None and norm > clip_norm:
            factor = clip_norm / norm
        for p in params:
            g = p.grad * factor if factor != 1.0 else p.grad
            if l2:
                g = g + l2 * p.value
            p.value -= lr * g
    for p in params:
        p.zero_grad()
    return ok
