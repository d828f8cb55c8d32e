"""Hidden z-loss on the final hidden states before the last normalisation."""
from dataclasses import dataclass

from ..diffcore import Tensor, logsumexp
from ..diffcore.tensor import lift
from ..errors import ParameterError


@dataclass
class ZLossConfig:
    lam: float = 1e-5

    def __post_init__(self):
        if self.lam < 0:
            raise ParameterError(f'z-loss coefficient must be non-negative, got {self.lam}')


def hidden_z_loss(z, lam: float) -> Tensor:
    """``(lam/T) * sum_t (log sum_i exp|z_t^i|)**2`` over the ``T`` rows of ``z`` (``[..., d]``).

    The log-sum-exp subtracts the row maximum before exponentiating.
    """
    if lam < 0:
        raise ParameterError(f'z-loss coefficient must be non-negative, got {lam}')
    z = lift(z)
    flat = z.reshape(-1, z.shape[-1])
    lse = logsumexp(flat.abs(), axis=-1)
    return (lse * lse).sum() * (lam / flat.shape[0])
