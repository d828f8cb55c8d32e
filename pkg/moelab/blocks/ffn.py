"""Dense feed-forward blocks and the fine-grained expert bank."""
import logging
from typing import Sequence

import numpy as np

from .init import init_parameter
from ..diffcore import Module, RngState, Tensor, scatter_rows
from ..diffcore.tensor import lift, no_grad
from ..errors import ConfigurationError, DimensionError, ParameterError, RoutingError
from ..routing.router import RouterState, RoutingDecision, route_topk

logger = logging.getLogger('moelab')

GAMMA_SCOPES = ('ffn', 'all')


def variance_gamma(m: int) -> float:
    """Output scale restoring the init variance after splitting experts ``m`` ways: ``sqrt(m*m) = m``."""
    if int(m) != m or m < 1:
        raise ParameterError(f'segmentation factor must be an integer >= 1, got {m}')
    return float(m)


class DenseFFN(Module):
    """``silu(x @ w_up) @ w_down``."""

    def __init__(self, d_model: int, d_inter: int, init_variance: float = 4e-4, rng=None):
        self.w_up = init_parameter((d_model, d_inter), init_variance, rng)
        self.w_down = init_parameter((d_inter, d_model), init_variance, rng)

    def __call__(self, x) -> Tensor:
        return (lift(x) @ self.w_up).silu() @ self.w_down


class ExpertBank(Module):
    """``n_experts`` FFN experts of equal shape, stored as stacked weights.

    Parameters
    ----------
    d_model : int
        Token width.
    n_experts : int
        Number of (fine-grained) FFN experts.
    d_inter : int
        Intermediate width of each expert.
    segmentation : int
        Factor ``m`` the experts were split by.
    compensate : bool
        Scale the expert output by ``gamma = m``; ``gamma = 1`` otherwise.
    gamma_scope : str
        ``'ffn'`` scales only FFN-expert contributions, ``'all'`` also the
        zero-expert passthrough.
    """

    def __init__(self, d_model: int, n_experts: int, d_inter: int, segmentation: int = 1,
                 compensate: bool = True, gamma_scope: str = 'ffn', init_variance: float = 4e-4, rng=None):
        if gamma_scope not in GAMMA_SCOPES:
            raise ConfigurationError(f'gamma_scope must be one of {GAMMA_SCOPES}, got "{gamma_scope}"')
        self.d_model = d_model
        self.n_experts = n_experts
        self.d_inter = d_inter
        self.segmentation = segmentation
        self.gamma = variance_gamma(segmentation) if compensate else 1.0
        self.gamma_scope = gamma_scope
        self.w_up = init_parameter((n_experts, d_model, d_inter), init_variance, rng)
        self.w_down = init_parameter((n_experts, d_inter, d_model), init_variance, rng)

    @classmethod
    def segmented(cls, d_model: int, n_base: int, d_expert_inter: int, m: int, **kwargs) -> 'ExpertBank':
        """Split ``n_base`` experts of width ``d_expert_inter`` into ``m*n_base`` experts of width ``d_expert_inter/m``."""
        variance_gamma(m)
        if d_expert_inter % m:
            raise ConfigurationError(f'm={m} does not divide the expert width {d_expert_inter}')
        return cls(d_model, m * n_base, d_expert_inter // m, segmentation=m, **kwargs)

    def expert(self, index: int, x: Tensor) -> Tensor:
        return (x @ self.w_up[index]).silu() @ self.w_down[index]


def moe_forward(x, decision: RoutingDecision, bank: ExpertBank) -> Tensor:
    """Combine the selected experts for every token of ``x`` (``[T, d_model]``).

    ``gamma * sum(g_i * FFN_i(x))`` over selected FFN experts plus
    ``sum(g_i) * x`` over selected zero experts. Experts are visited in index
    order so the accumulation order is fixed.
    """
    x = lift(x)
    if x.ndim != 2 or x.shape[0] != decision.n_tokens:
        raise DimensionError(f'expected [{decision.n_tokens}, d_model] tokens, got {x.shape}')
    if decision.n_ffn != bank.n_experts:
        raise ConfigurationError(f'decision routes over {decision.n_ffn} FFN experts, bank has {bank.n_experts}')
    indices = decision.indices
    n_total = decision.n_ffn + decision.n_zero
    if indices.size and (indices.min() < 0 or indices.max() >= n_total):
        raise RoutingError(f'expert index out of range [0, {n_total})')
    n_tokens = x.shape[0]

    ffn_out = None
    for e in np.unique(indices[indices < bank.n_experts]):
        rows, slots = np.nonzero(indices == e)
        y = bank.expert(int(e), x[rows]) * decision.gates[rows, slots].reshape(-1, 1)
        y = scatter_rows(y, rows, n_tokens)
        ffn_out = y if ffn_out is None else ffn_out + y

    zero_mask = ~decision.ffn_mask
    zero_out = None
    if zero_mask.any():
        zero_out = x * (decision.gates * zero_mask).sum(axis=-1, keepdims=True)

    if ffn_out is None:
        if zero_out is None:
            return x * 0.0
        return zero_out * bank.gamma if bank.gamma_scope == 'all' else zero_out
    if zero_out is None:
        return ffn_out * bank.gamma
    if bank.gamma_scope == 'all':
        return (ffn_out + zero_out) * bank.gamma
    return ffn_out * bank.gamma + zero_out


def moe_init_output_variance(m: int,
                             compensate: bool,
                             n_base: int = 4,
                             d_model: int = 64,
                             d_expert_inter: int = 128,
                             top_k_base: int = 2,
                             tokens: int = 10000,
                             seeds: Sequence[int] = (0, 1, 2),
                             init_variance: float = None) -> float:
    """Monte Carlo output variance of a freshly initialised MoE block.

    The block has ``m*n_base`` experts of width ``d_expert_inter/m``, selects
    ``m*top_k_base`` of them, has no zero experts and a near-uniform router.
    The result is averaged over ``seeds``.
    """
    init_variance = 1.0 / d_model if init_variance is None else init_variance
    values = []
    with no_grad():
        for seed in seeds:
            rng = RngState(seed)
            bank = ExpertBank.segmented(d_model, n_base, d_expert_inter, m, compensate=compensate,
                                        init_variance=init_variance, rng=rng.spawn(1))
            top_k = m * top_k_base
            router = RouterState(d_model, bank.n_experts, 0, top_k, top_k, init_variance=1e-6, rng=rng.spawn(2))
            x = Tensor(rng.spawn(3).generator.standard_normal((tokens, d_model)))
            out = moe_forward(x, route_topk(x, router), bank)
            values.append(float(np.var(out.data)))
    logger.debug(f'MoE init output variance m={m} compensate={compensate}: {values}')
    return float(np.mean(values))
