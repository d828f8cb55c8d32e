"""Group-level load-balance loss over FFN expert groups and the zero-expert group."""
import logging
from dataclasses import dataclass

import numpy as np

from .router import RoutingDecision
from ..diffcore import Tensor
from ..diffcore.tensor import lift
from ..errors import ConfigurationError, ParameterError

logger = logging.getLogger('moelab')

ZERO_GROUP_COUNTS = ('per_slot', 'per_token')


@dataclass
class LBLossConfig:
    """Load-balance loss settings.

    Parameters
    ----------
    alpha : float
        Balance factor.
    n_groups : int
        Number ``D`` of FFN expert groups; must divide the FFN expert count.
    zero_group_count : str
        ``'per_slot'`` counts every zero-expert slot a token selects,
        ``'per_token'`` counts a token once if it selects any zero expert.
    """
    alpha: float = 1e-3
    n_groups: int = 1
    zero_group_count: str = 'per_slot'

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError(f'alpha must be non-negative, got {self.alpha}')
        if self.n_groups < 1:
            raise ConfigurationError(f'n_groups must be >= 1, got {self.n_groups}')
        if self.zero_group_count not in ZERO_GROUP_COUNTS:
            raise ConfigurationError(f'zero_group_count must be one of {ZERO_GROUP_COUNTS}')

    def group_size(self, n_ffn: int) -> int:
        if n_ffn % self.n_groups:
            raise ConfigurationError(f'D={self.n_groups} groups do not divide N={n_ffn} FFN experts')
        return n_ffn // self.n_groups


def group_frequencies(decision: RoutingDecision, cfg: LBLossConfig) -> np.ndarray:
    """Selection frequencies ``f_1..f_D`` of the FFN groups and ``f_{D+1}`` of the zero group.

    Both are normalised so that perfectly balanced routing gives one.
    """
    n_groups = cfg.n_groups
    size = cfg.group_size(decision.n_ffn)
    tokens = decision.n_tokens
    top_k, k_expected = decision.top_k, decision.k_expected
    ffn = decision.ffn_mask
    group = np.where(ffn, decision.indices // size, n_groups)
    counts = np.bincount(group.reshape(-1), minlength=n_groups + 1)
    f = np.zeros(n_groups + 1)
    f[:n_groups] = n_groups / (k_expected * tokens) * counts[:n_groups]
    if decision.n_zero and top_k > k_expected:
        if cfg.zero_group_count == 'per_slot':
            zero_count = counts[n_groups]
        else:
            zero_count = int((decision.zero_counts > 0).sum())
        f[n_groups] = zero_count / ((top_k - k_expected) * tokens)
    return f


def balance_gradient(decision: RoutingDecision, cfg: LBLossConfig) -> np.ndarray:
    """Gradient of the unscaled balance loss with respect to the mean router probabilities.

    Every expert receives the frequency of its group.
    """
    f = group_frequencies(decision, cfg)
    size = cfg.group_size(decision.n_ffn)
    grad = np.empty(decision.n_ffn + decision.n_zero)
    grad[:decision.n_ffn] = np.repeat(f[:cfg.n_groups], size)
    grad[decision.n_ffn:] = f[cfg.n_groups]
    return grad


def lb_loss(probs, decision: RoutingDecision, cfg: LBLossConfig) -> Tensor:
    """``alpha * sum_j f_j * P_j`` with ``P_j`` the mean probability mass of group ``j``.

    Differentiable with respect to ``probs`` (shape ``[T, N+Z]``); the
    frequencies are constants of the routing decision.
    """
    probs = lift(probs)
    if probs.shape[0] == 0:
        raise ConfigurationError('lb_loss needs at least one token')
    f = group_frequencies(decision, cfg)
    n_ffn, n_groups = decision.n_ffn, cfg.n_groups
    mass = probs.mean(axis=0)
    p_groups = mass[:n_ffn].reshape(n_groups, cfg.group_size(n_ffn)).sum(axis=1)
    loss = (p_groups * f[:n_groups]).sum()
    if decision.n_zero:
        loss = loss + mass[n_ffn:].sum() * float(f[n_groups])
    return loss * cfg.alpha
