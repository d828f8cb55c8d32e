"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every operation on tensors that require
gradients records its parents and a closure that pushes the output gradient
back to them. :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.

All reductions run in a fixed order so that identical inputs give bitwise
identical results. Matrix products in particular accumulate over the inner
dimension left to right (see :func:`fixed_matmul`).
"""
import contextlib
import logging
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from .._cfg import get_config
from ..errors import DimensionError

logger = logging.getLogger('moelab')

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager disabling graph recording (inference, probes)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def default_dtype() -> np.dtype:
    """The floating point precision selected via ``set_config(dtype=...)``."""
    return np.dtype(get_config('dtype'))


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == 'f':
        return data
    return np.asarray(data, dtype=dtype or default_dtype())


def fixed_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes with a fixed accumulation order.

    Each output element is accumulated as ``((0 + a0*b0) + a1*b1) + ...``,
    exactly like a naive triple loop. Leading axes broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f'matmul needs at least 2-d operands, got {a.shape} and {b.shape}')
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f'matmul inner dimensions disagree: {a.shape} x {b.shape}')
    try:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DimensionError(f'matmul batch dimensions disagree: {a.shape} x {b.shape}') from e
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=np.result_type(a.dtype, b.dtype))
    for k in range(a.shape[-1]):
        out += a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: 'Tensor', grad: np.ndarray):
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    if t.grad is None:
        t.grad = np.array(grad, dtype=t.data.dtype, copy=True)
    else:
        t.grad = t.grad + grad


def _make(data: np.ndarray, parents: Tuple['Tensor', ...], op: str) -> 'Tensor':
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=track, _parents=parents if track else (), _op=op)


def lift(value, like: Optional['Tensor'] = None) -> 'Tensor':
    """Return ``value`` as a Tensor (constants do not require gradients)."""
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype or default_dtype()))


class Tensor:
    """n-dimensional array of real scalars with an optional gradient.

    Parameters
    ----------
    data : array_like
        Values. Floating point numpy arrays keep their dtype, everything else is
        converted to the configured default dtype.
    requires_grad : bool
        Whether gradients are accumulated into ``grad`` during ``backward()``.
    """
    __array_ufunc__ = None  # numpy defers binary operators to Tensor

    def __init__(self, data, requires_grad: bool = False, _parents: Tuple['Tensor', ...] = (), _op: str = ''):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward: Optional[Callable[[], None]] = None
        self._op = _op

    def __repr__(self):
        return f'Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f'item() needs a single element, got shape {self.shape}')
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def zero_graph_grad(self):
        """Clear ``grad`` on this tensor and every tensor it was computed from."""
        for node in self._topological_order():
            node.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    # graph traversal

    def _topological_order(self):
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f'backward() without a seed gradient needs a scalar, got shape {self.shape}')
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            logger.debug('backward() called on a tensor that does not require gradients')
            return
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(self._topological_order()):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # arithmetic

    def __add__(self, other):
        other = lift(other, like=self)
        out = _make(self.data + other.data, (self, other), 'add')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad)
                _accumulate(other, out.grad)

            out._backward = _backward
        return out

    def __radd__(self, other):
        return lift(other, like=self) + self

    def __sub__(self, other):
        other = lift(other, like=self)
        out = _make(self.data - other.data, (self, other), 'sub')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad)
                _accumulate(other, -out.grad)

            out._backward = _backward
        return out

    def __rsub__(self, other):
        return lift(other, like=self) - self

    def __mul__(self, other):
        other = lift(other, like=self)
        out = _make(self.data * other.data, (self, other), 'mul')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * other.data)
                _accumulate(other, out.grad * self.data)

            out._backward = _backward
        return out

    def __rmul__(self, other):
        return lift(other, like=self) * self

    def __truediv__(self, other):
        other = lift(other, like=self)
        out = _make(self.data / other.data, (self, other), 'div')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad / other.data)
                _accumulate(other, -out.grad * self.data / (other.data * other.data))

            out._backward = _backward
        return out

    def __rtruediv__(self, other):
        return lift(other, like=self) / self

    def __neg__(self):
        out = _make(-self.data, (self,), 'neg')
        if out.requires_grad:
            def _backward():
                _accumulate(self, -out.grad)

            out._backward = _backward
        return out

    def __pow__(self, exponent: float):
        if isinstance(exponent, Tensor):
            raise TypeError('Only scalar exponents are supported')
        out = _make(self.data ** exponent, (self,), 'pow')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * exponent * self.data ** (exponent - 1))

            out._backward = _backward
        return out

    def __matmul__(self, other):
        other = lift(other, like=self)
        out = _make(fixed_matmul(self.data, other.data), (self, other), 'matmul')
        if out.requires_grad:
            def _backward():
                if self.requires_grad:
                    _accumulate(self, fixed_matmul(out.grad, np.swapaxes(other.data, -1, -2)))
                if other.requires_grad:
                    _accumulate(other, fixed_matmul(np.swapaxes(self.data, -1, -2), out.grad))

            out._backward = _backward
        return out

    # reductions

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), 'sum')
        if out.requires_grad:
            def _backward():
                grad = out.grad
                if axis is not None and not keepdims:
                    grad = np.expand_dims(grad, axis)
                _accumulate(self, np.broadcast_to(grad, self.data.shape))

            out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.data.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    # elementwise functions

    def exp(self) -> 'Tensor':
        value = np.exp(self.data)
        out = _make(value, (self,), 'exp')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * value)

            out._backward = _backward
        return out

    def log(self) -> 'Tensor':
        out = _make(np.log(self.data), (self,), 'log')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad / self.data)

            out._backward = _backward
        return out

    def abs(self) -> 'Tensor':
        out = _make(np.abs(self.data), (self,), 'abs')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * np.sign(self.data))

            out._backward = _backward
        return out

    def sqrt(self) -> 'Tensor':
        value = np.sqrt(self.data)
        out = _make(value, (self,), 'sqrt')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * 0.5 / value)

            out._backward = _backward
        return out

    def sigmoid(self) -> 'Tensor':
        value = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        out = _make(value, (self,), 'sigmoid')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * value * (1.0 - value))

            out._backward = _backward
        return out

    def silu(self) -> 'Tensor':
        sig = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        out = _make(self.data * sig, (self,), 'silu')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * (sig + self.data * sig * (1.0 - sig)))

            out._backward = _backward
        return out

    def relu(self) -> 'Tensor':
        mask = self.data > 0
        out = _make(self.data * mask, (self,), 'relu')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad * mask)

            out._backward = _backward
        return out

    # shape manipulation

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,), 'reshape')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad.reshape(self.data.shape))

            out._backward = _backward
        return out

    def transpose(self, *axes) -> 'Tensor':
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        out = _make(np.transpose(self.data, axes), (self,), 'transpose')
        if out.requires_grad:
            def _backward():
                _accumulate(self, np.transpose(out.grad, inverse))

            out._backward = _backward
        return out

    def swapaxes(self, axis1: int, axis2: int) -> 'Tensor':
        axes = list(range(self.ndim))
        axes[axis1], axes[axis2] = axes[axis2], axes[axis1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape: Sequence[int]) -> 'Tensor':
        out = _make(np.broadcast_to(self.data, tuple(shape)).copy(), (self,), 'broadcast_to')
        if out.requires_grad:
            def _backward():
                _accumulate(self, out.grad)

            out._backward = _backward
        return out

    def __getitem__(self, index) -> 'Tensor':
        out = _make(self.data[index], (self,), 'getitem')
        if out.requires_grad:
            def _backward():
                grad = np.zeros_like(self.data)
                np.add.at(grad, index, out.grad)
                _accumulate(self, grad)

            out._backward = _backward
        return out


ArrayLike = Union[Tensor, np.ndarray, float, int, Sequence]
