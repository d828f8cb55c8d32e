"""Deterministic tensors, reverse-mode differentiation and parameter plumbing."""
from .checkpoint import save_tensors, load_tensors
from .functional import softmax, log_softmax, logsumexp, cross_entropy, concat, scatter_rows, rope_apply
from .gradcheck import grad_check
from .parameter import Parameter, ParamClass, Module
from .rng import RngState, seeded_init
from .tensor import Tensor, fixed_matmul, no_grad, lift


def matmul(a, b) -> Tensor:
    """Matrix product with fixed accumulation order (see :func:`fixed_matmul`)."""
    return lift(a) @ lift(b)


__all__ = ['Tensor', 'Parameter', 'ParamClass', 'Module', 'RngState',
           'matmul', 'fixed_matmul', 'softmax', 'log_softmax', 'logsumexp', 'cross_entropy',
           'concat', 'scatter_rows', 'rope_apply', 'grad_check', 'seeded_init',
           'save_tensors', 'load_tensors', 'no_grad', 'lift']
