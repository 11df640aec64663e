"""Neural building blocks composed from the differentiable primitives."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from pcmnet.errors import ConfigError
from pcmnet.numerics import ops
from pcmnet.numerics.tape import Var, to_var


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def linear(x, weight, bias=None) -> Var:
    """Row-vector convention: ``x @ weight + bias``."""
    out = ops.matmul(x, weight)
    return out if bias is None else ops.add(out, bias)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: ``-inf`` strictly above the diagonal."""
    mask = np.zeros((n, n))
    mask[np.triu_indices(n, k=1)] = -np.inf
    return mask


def multi_head_attention(q, k, v, params: Mapping[str, object], n_heads: int,
                         mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product attention over ``n_heads`` heads.

    ``params`` holds ``wq``, ``wk``, ``wv`` and ``wo`` (each ``D x D``); head
    ``i`` uses the i-th block of ``D / n_heads`` columns of the first three.
    Inputs are ``(T, D)`` or ``(B, T, D)``.  The softmax scale is the square
    root of the per-head dimension.
    """
    q, k, v = to_var(q), to_var(k), to_var(v)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = (ops.reshape(x, (1,) + x.shape) for x in (q, k, v))
    b, tq, d = q.shape
    tk = k.shape[1]
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"{n_heads} heads do not divide model dim {d}")
    dh = d // n_heads

    def split(x, t):
        return ops.transpose(ops.reshape(x, (b, t, n_heads, dh)), (0, 2, 1, 3))

    qh = split(ops.matmul(q, params["wq"]), tq)
    kh = split(ops.matmul(k, params["wk"]), tk)
    vh = split(ops.matmul(v, params["wv"]), tk)
    scores = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ops.add(scores, mask)
    weights = ops.softmax(scores, axis=-1)
    heads = ops.matmul(weights, vh)
    merged = ops.reshape(ops.transpose(heads, (0, 2, 1, 3)), (b, tq, d))
    out = ops.matmul(merged, params["wo"])
    if squeeze:
        out = ops.reshape(out, (tq, d))
    if return_weights:
        w = weights.value[0] if squeeze else weights.value
        return out, w
    return out


def feed_forward(x, w1, b1, w2, b2) -> Var:
    return linear(ops.relu(linear(x, w1, b1)), w2, b2)


def sinusoidal_positions(n_positions: int, dim: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
