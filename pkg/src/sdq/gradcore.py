"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Operations record onto the innermost active :class:`Tape` whenever one of
their inputs requires a gradient.  ``backward(loss)`` replays the tape in
reverse recording order, which is a valid reverse topological order, so
gradient accumulation happens in a fixed sequence and repeated runs are
bit-identical.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape():
    ...     y = x * x
    ...     backward(y)
    >>> float(x.grad)
    6.0
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K


class ContractError(ValueError):
    """Raised when an operation's precondition is violated."""


class GradCheckError(ArithmeticError):
    """Raised when a gradient check meets a non-finite value."""


class NumericalAbort(ArithmeticError):
    """Raised when training produces a non-finite loss."""


_TAPES: list["Tape"] = []
_SURROGATE = [False]


@dataclass
class _Record:
    out: "Tensor"
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for evaluation passes."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES[:] = saved


@contextlib.contextmanager
def surrogate_mode():
    """Evaluate every straight-through rounding as the identity.

    Under this mode a function built from STE rounds becomes the smooth
    surrogate whose derivative the STE backward rule claims to be, which is
    what finite differences can check.
    """
    prev = _SURROGATE[0]
    _SURROGATE[0] = True
    try:
        yield
    finally:
        _SURROGATE[0] = prev


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


class Tensor:
    __slots__ = ("data", "_grad", "requires_grad", "_tape", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.array(value, dtype=np.float64).reshape(self.data.shape)

    def zero_grad(self):
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # reductions and elementwise helpers
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def abs(self):
        return tabs(self)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _record(out_data, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(ancestor) into every ancestor's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    tape = loss._tape
    if tape is None:
        return
    if tape.consumed:
        raise ContractError("tape already consumed; run a new forward pass")
    live = {id(loss)}
    for rec in reversed(tape.records):
        if id(rec.out) not in live:
            continue
        grads = rec.backward(rec.out.grad)
        for inp, g in zip(rec.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            g = _unbroadcast(np.asarray(g, dtype=np.float64), inp.shape)
            if inp._grad is None:
                inp._grad = g.copy()
            else:
                inp._grad += g
            live.add(id(inp))
    tape.consumed = True
    tape.records.clear()


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def neg(a) -> Tensor:
    a = _lift(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    return _record(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def power(a, exponent: int | float) -> Tensor:
    a = _lift(a)
    ad = a.data
    if exponent == 2:
        return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,))
    return _record(ad ** exponent, (a,), lambda g: (exponent * ad ** (exponent - 1) * g,))


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _lift(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tabs(a) -> Tensor:
    a = _lift(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _lift(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def clamp(a, lo: float, hi: float, straight_through: bool = False) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is masked to the closed interval
    unless ``straight_through`` is set."""
    a = _lift(a)
    ad = a.data
    out = np.clip(ad, lo, hi)
    if straight_through:
        return _record(out, (a,), lambda g: (g,))
    mask = (ad >= lo) & (ad <= hi)
    return _record(out, (a,), lambda g: (g * mask,))


def round_(a, backward: str | Callable = "ste") -> Tensor:
    """Round half away from zero with a pluggable backward rule.

    ``backward`` is ``"ste"`` (identity), ``"zero"`` (true a.e. derivative)
    or a callable ``(upstream, input_data) -> input_grad``.
    """
    a = _lift(a)
    ad = a.data
    if _SURROGATE[0] and backward == "ste":
        return _record(ad.copy(), (a,), lambda g: (g,))
    out = K.round_half_away(ad)
    if backward == "ste":
        fn = lambda g: (g,)
    elif backward == "zero":
        fn = lambda g: (np.zeros_like(g),)
    elif callable(backward):
        fn = lambda g: (backward(g, ad),)
    else:
        raise ContractError(f"unknown round backward rule {backward!r}")
    return _record(out, (a,), fn)


def quantize_grid(a, levels: int) -> Tensor:
    """Fused ``round(levels * a) / levels`` with an exact identity backward."""
    a = _lift(a)
    if _SURROGATE[0]:
        return _record(a.data.copy(), (a,), lambda g: (g,))
    return _record(K.quantize_grid(a.data, float(levels)), (a,), lambda g: (g,))


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward value ``hard``; the gradient flows to ``soft`` unchanged."""
    hard = _as_array(hard)
    if hard.shape != soft.shape:
        raise ContractError("straight_through: hard and soft shapes differ")
    return _record(hard.copy(), (soft,), lambda g: (g,))


# ------------------------------------------------------------------ reductions

def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))
    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand(g, shape, axis, keepdims) / n,))


def variance(a, axis=None) -> Tensor:
    """Population variance (divides by the element count)."""
    a = _lift(a)
    d = a - mean(a, axis=axis, keepdims=True)
    return mean(d * d, axis=axis)


def l1_norm(a) -> Tensor:
    return tsum(tabs(a))


def l2_norm(a) -> Tensor:
    a = _lift(a)
    nrm = float(np.sqrt(np.sum(a.data * a.data)))
    ad = a.data
    return _record(np.array(nrm), (a,), lambda g: (g * ad / nrm if nrm > 0 else np.zeros_like(ad),))


def max_abs(a) -> Tensor:
    """max(|a|); the gradient goes to the first arg-max entry."""
    a = _lift(a)
    flat = np.abs(a.data).ravel()
    k = int(np.argmax(flat))
    sign = np.sign(a.data.ravel()[k])
    shape = a.shape

    def fn(g):
        out = np.zeros(flat.size)
        out[k] = float(g) * sign
        return (out.reshape(shape),)

    return _record(np.array(flat[k]), (a,), fn)


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), fn)


def log_softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def fn(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), fn)


def segment_sum(a, idx: np.ndarray, nbins: int) -> Tensor:
    """Sum entries of flat ``a`` into ``nbins`` buckets given by ``idx``."""
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.int64).ravel()
    shape = a.shape
    return _record(K.segment_sum(a.data, idx, nbins), (a,),
                   lambda g: (g[idx].reshape(shape),))


# --------------------------------------------------------------------- shaping

def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), fn)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(data, tensors, fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(data, tensors, fn)


# ----------------------------------------------------------------- linear ops

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = g @ np.swapaxes(bd, -1, -2) if bd.ndim > 1 else np.outer(g, bd)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.outer(ad, g)
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW input, (out, in, kh, kw) kernel, no dilation or groups."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ContractError(f"conv2d shapes incompatible: {x.shape} * {w.shape}")
    xd, wd = x.data, w.data
    out = K.conv2d_forward(xd, wd, stride, padding)

    def fn(g):
        g = np.ascontiguousarray(g)
        gx = K.conv2d_backward_input(g, wd, xd.shape, stride, padding) if x.requires_grad else None
        gw = K.conv2d_backward_weight(g, xd, wd.shape, stride, padding) if w.requires_grad else None
        return gx, gw

    return _record(out, (x, w), fn)


# ------------------------------------------------------------------ checking

def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5,
               surrogate: bool = False) -> float:
    """Max relative error between the tape gradient and central differences.

    The error at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    With ``surrogate=True`` both sides are evaluated with STE rounds replaced
    by the identity, so the check covers the straight-through path.
    """
    if h <= 0:
        raise ContractError("grad_check step must be positive")
    point = np.array(_as_array(point), dtype=np.float64)
    ctx = surrogate_mode() if surrogate else contextlib.nullcontext()
    with ctx:
        x = Tensor(point.copy(), requires_grad=True)
        with Tape():
            y = f(x)
            backward(y)
        analytic = x.grad.copy()
        worst = 0.0
        with no_grad():
            for i in np.ndindex(point.shape):
                hi = point.copy()
                lo = point.copy()
                hi[i] += h
                lo[i] -= h
                fp = float(f(Tensor(hi)).data)
                fm = float(f(Tensor(lo)).data)
                if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(analytic[i])):
                    raise GradCheckError(f"non-finite value at coordinate {i}")
                num = (fp - fm) / (2 * h)
                worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(num)))
    return worst
