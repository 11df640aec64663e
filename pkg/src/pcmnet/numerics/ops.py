"""Differentiable primitives.

Every function accepts :class:`Var` or array-likes and returns a ``Var``.
When at least one operand is tracked, the result is recorded on that tape
together with a closure mapping the output gradient to operand gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from pcmnet.errors import InvalidArgumentError, ShapeError
from pcmnet.numerics.tape import Var, to_var, tracking_tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _emit(value: np.ndarray, parents: Sequence[Var], backward) -> Var:
    out = Var(value)
    tape = tracking_tape(*parents)
    if tape is not None:
        tape.record(out, parents, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Var:
    a, b = to_var(a), to_var(b)
    sa, sb = a.shape, b.shape
    return _emit(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(g, sb) if b.requires_grad else None))


def sub(a, b) -> Var:
    a, b = to_var(a), to_var(b)
    sa, sb = a.shape, b.shape
    return _emit(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa) if a.requires_grad else None,
                            _unbroadcast(-g, sb) if b.requires_grad else None))


def mul(a, b) -> Var:
    a, b = to_var(a), to_var(b)
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                            _unbroadcast(g * av, bv.shape) if b.requires_grad else None))


def div(a, b) -> Var:
    a, b = to_var(a), to_var(b)
    av, bv = a.value, b.value
    out = av / bv
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def exp(a) -> Var:
    a = to_var(a)
    out = np.exp(a.value)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    a = to_var(a)
    av = a.value
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def relu(a) -> Var:
    a = to_var(a)
    # subgradient convention: derivative 0 at exactly 0
    mask = a.value > 0
    return _emit(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = to_var(a), to_var(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                # fold batch dims: sum_b a_b^T g_b as a single 2-d product
                ga2 = av.reshape(-1, av.shape[-1])
                gb = ga2.T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(av @ bv, (a, b), backward)


def transpose(a, axes: Sequence[int]) -> Var:
    a = to_var(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Var:
    a = to_var(a)
    old = a.shape
    return _emit(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Var:
    a = to_var(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(a.value[index], (a,), backward)


def concat(items: Sequence, axis: int = 0) -> Var:
    vs = [to_var(x) for x in items]
    sizes = [v.shape[axis] for v in vs]
    splits = np.cumsum(sizes)[:-1]
    return _emit(np.concatenate([v.value for v in vs], axis=axis), vs,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Var:
    a = to_var(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = to_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation layers
# ---------------------------------------------------------------------------

def _softmax_values(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(v, temperature: float = 1.0, axis: int = -1) -> Var:
    """Numerically stable softmax of ``v / temperature`` along ``axis``."""
    if not temperature > 0:
        raise InvalidArgumentError(f"softmax temperature must be positive, got {temperature}")
    v = to_var(v)
    z = v.value / temperature if temperature != 1.0 else v.value
    y = _softmax_values(z, axis)

    def backward(g):
        dz = y * (g - np.sum(g * y, axis=axis, keepdims=True))
        return (dz / temperature if temperature != 1.0 else dz,)

    return _emit(y, (v,), backward)


def log_softmax(v, axis: int = -1) -> Var:
    v = to_var(v)
    z = v.value - np.max(v.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _emit(out, (v,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Var:
    """Normalise each row of ``x`` over its last axis, then apply gain/bias."""
    x, gain, bias = to_var(x), to_var(gain), to_var(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm feature dim {d} vs gain {gain.shape} / bias {bias.shape}")
    if not eps > 0:
        raise InvalidArgumentError("layer_norm eps must be positive")
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gv = gain.value

    def backward(g):
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, np.sum(g * xhat, axis=lead), np.sum(g, axis=lead)

    return _emit(xhat * gv + bias.value, (x, gain, bias), backward)


def where(cond, a, b) -> Var:
    """Elementwise ``a`` where ``cond`` holds, else ``b`` (cond is constant)."""
    a, b = to_var(a), to_var(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.value, b.value)
    return _emit(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None,
                            _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None))
