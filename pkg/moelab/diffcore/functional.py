"""Differentiable functions acting on more than one element at a time."""
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _accumulate, _make, lift
from ..errors import DimensionError, RoutingError

#: additive mask value for disallowed attention scores
MASK_VALUE = -1e30


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max-subtraction.

    >>> softmax([0., 0.]).data
    array([0.5, 0.5])
    """
    x = lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    out = _make(value, (x,), 'softmax')
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(x, value * (g - (g * value).sum(axis=axis, keepdims=True)))

        out._backward = _backward
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    x = lift(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    out = _make(value, (x,), 'log_softmax')
    if out.requires_grad:
        def _backward():
            g = out.grad
            _accumulate(x, g - np.exp(value) * g.sum(axis=axis, keepdims=True))

        out._backward = _backward
    return out


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(x))) along ``axis``; the maximum is factored out first."""
    x = lift(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    value = m + np.log(s)
    probs = e / s
    out = _make(value if keepdims else np.squeeze(value, axis=axis), (x,), 'logsumexp')
    if out.requires_grad:
        def _backward():
            g = out.grad if keepdims else np.expand_dims(out.grad, axis)
            _accumulate(x, g * probs)

        out._backward = _backward
    return out


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` has shape ``[..., V]`` and ``targets`` the leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f'logits {logits.shape} do not match targets {targets.shape}')
    if targets.size == 0:
        raise DimensionError('cross_entropy needs at least one target')
    flat = log_softmax(logits.reshape(-1, logits.shape[-1]), axis=-1)
    picked = flat[np.arange(targets.size), targets.reshape(-1)]
    return -picked.mean()


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [lift(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), 'concat')
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]

        def _backward():
            parts = np.split(out.grad, np.cumsum(sizes)[:-1], axis=axis)
            for t, part in zip(tensors, parts):
                _accumulate(t, part)

        out._backward = _backward
    return out


def scatter_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``src`` at positions ``rows`` of an ``n_rows`` tensor of zeros.

    Inverse of gathering ``x[rows]``; ``rows`` must not repeat.
    """
    rows = np.asarray(rows, dtype=np.int64)
    if rows.shape[0] != src.shape[0]:
        raise DimensionError(f'{rows.shape[0]} row indices for {src.shape[0]} rows')
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows):
        raise RoutingError(f'row index out of range [0, {n_rows})')
    value = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    value[rows] = src.data
    out = _make(value, (src,), 'scatter_rows')
    if out.requires_grad:
        def _backward():
            _accumulate(src, out.grad[rows])

        out._backward = _backward
    return out


def rope_apply(x, positions: Optional[np.ndarray] = None, base_frequency: float = 1e6) -> Tensor:
    """Rotary position embedding on the last axis of ``x`` (shape ``[..., T, d]``).

    Consecutive element pairs ``(2i, 2i+1)`` are rotated by the angle
    ``position * base_frequency ** (-2i/d)``.

    Parameters
    ----------
    x : Tensor or array_like
        Input, last dimension must be even.
    positions : array_like, optional
        One position per row along axis ``-2``. Defaults to ``0..T-1``.
    base_frequency : float
        Base of the geometric frequency ladder.
    """
    x = lift(x)
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f'rotary dimension must be even, got {d}')
    if positions is None:
        positions = np.arange(x.shape[-2])
    positions = np.atleast_1d(np.asarray(positions, dtype=x.dtype))
    inv_freq = base_frequency ** (-np.arange(0, d, 2, dtype=x.dtype) / d)
    angles = positions[:, None] * inv_freq[None, :]
    cos = np.repeat(np.cos(angles), 2, axis=-1)
    sin = np.repeat(np.sin(angles), 2, axis=-1)
    sin[:, 0::2] *= -1.0
    partner = np.arange(d).reshape(-1, 2)[:, ::-1].reshape(-1)
    return x * cos + x[..., partner] * sin
