import numpy as np

from ..diffcore import Module, Parameter, ParamClass, Tensor
from ..diffcore.tensor import lift


def rms_norm(x, weight=None, eps: float = 1e-6) -> Tensor:
    """Divide by the root mean square over the last axis, then scale by ``weight``."""
    x = lift(x)
    out = x * ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    if weight is None:
        return out
    return out * weight


class RMSNorm(Module):

    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = Parameter(np.ones(dim), ParamClass.HIDDEN)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return rms_norm(x, self.weight, self.eps)
