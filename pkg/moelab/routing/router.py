"""Top-K routing over FFN experts and zero-computation experts.

Experts ``0..N-1`` are FFN experts, experts ``N..N+Z-1`` are zero-computation
experts that return their input. Selection uses the router probabilities plus
a per-expert bias, gating uses the unbiased probabilities.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..diffcore import Module, Parameter, ParamClass, Tensor, seeded_init, softmax
from ..diffcore.tensor import lift
from ..errors import ConfigurationError, EmptyBatchError, ParameterError

logger = logging.getLogger('moelab')


def validate_router_dims(n_ffn: int, n_zero: int, top_k: int, k_expected: float):
    """Raise :class:`ConfigurationError` unless the expert counts are consistent.

    With zero-computation experts ``1 <= K_e < K <= N+Z`` and ``Z >= K-K_e``.
    Without them (a fixed top-K router) ``K_e`` must equal ``K``.
    """
    if n_ffn < 1 or n_zero < 0:
        raise ConfigurationError(f'need N >= 1 and Z >= 0, got N={n_ffn}, Z={n_zero}')
    if not 1 <= top_k <= n_ffn + n_zero:
        raise ConfigurationError(f'K={top_k} must lie in [1, N+Z={n_ffn + n_zero}]')
    if n_zero == 0:
        if k_expected != top_k:
            raise ConfigurationError(f'without zero experts K_e must equal K, got K_e={k_expected}, K={top_k}')
        return
    if not 1 <= k_expected < top_k:
        raise ConfigurationError(f'K_e={k_expected} must satisfy 1 <= K_e < K={top_k}')
    if n_zero < top_k - k_expected:
        raise ConfigurationError(f'Z={n_zero} zero experts cannot absorb K-K_e={top_k - k_expected} slots')


@dataclass
class RoutingDecision:
    """Per-token routing result.

    Attributes
    ----------
    indices : numpy.ndarray
        ``[T, K]`` selected experts, highest biased score first.
    gates : Tensor
        ``[T, K]`` unbiased router probabilities of the selected experts.
    probs : Tensor
        ``[T, N+Z]`` router probabilities the gates were taken from.
    n_ffn, n_zero : int
        Expert counts.
    k_expected : float
        Target number of activated FFN experts per token.
    """
    indices: np.ndarray
    gates: Tensor
    probs: Tensor
    n_ffn: int
    n_zero: int
    k_expected: float

    @property
    def n_tokens(self) -> int:
        return self.indices.shape[0]

    @property
    def top_k(self) -> int:
        return self.indices.shape[1]

    @property
    def ffn_mask(self) -> np.ndarray:
        return self.indices < self.n_ffn

    @property
    def ffn_counts(self) -> np.ndarray:
        """Number of FFN experts selected by each token."""
        return self.ffn_mask.sum(axis=1)

    @property
    def zero_counts(self) -> np.ndarray:
        return self.top_k - self.ffn_counts

    @property
    def expert_loads(self) -> np.ndarray:
        """Tokens routed to each expert."""
        return np.bincount(self.indices.reshape(-1), minlength=self.n_ffn + self.n_zero).astype(np.int64)

    def rows(self, start: int, stop: int) -> 'RoutingDecision':
        """Decision of tokens ``start:stop``; gates and probabilities stay on the same graph."""
        return RoutingDecision(indices=self.indices[start:stop],
                               gates=self.gates[start:stop],
                               probs=self.probs[start:stop],
                               n_ffn=self.n_ffn,
                               n_zero=self.n_zero,
                               k_expected=self.k_expected)


def select_experts(probs,
                   bias: np.ndarray,
                   top_k: int,
                   n_ffn: int,
                   k_expected: Optional[float] = None,
                   renormalize: bool = False) -> RoutingDecision:
    """TopK of ``probs + bias`` per row; gates are ``probs`` at the selection.

    Ties are broken in favour of the lower expert index.
    """
    probs = lift(probs)
    n_tokens, n_experts = probs.shape
    if top_k > n_experts:
        raise ConfigurationError(f'K={top_k} exceeds the number of experts {n_experts}')
    scores = probs.data + np.asarray(bias, dtype=probs.dtype)
    indices = np.argsort(-scores, axis=1, kind='stable')[:, :top_k]
    gates = probs[np.arange(n_tokens)[:, None], indices]
    if renormalize:
        gates = gates / gates.sum(axis=-1, keepdims=True)
    return RoutingDecision(indices=indices,
                           gates=gates,
                           probs=probs,
                           n_ffn=n_ffn,
                           n_zero=n_experts - n_ffn,
                           k_expected=top_k if k_expected is None else k_expected)


class RouterState(Module):
    """Router projection, expert bias and the bias controller state.

    Parameters
    ----------
    d_model : int
        Width of the routed token vectors.
    n_ffn, n_zero : int
        Number of FFN experts ``N`` and zero-computation experts ``Z``.
    top_k : int
        Experts selected per token ``K``.
    k_expected : float
        Expected activated FFN experts per token ``K_e``.
    mu : float
        Bias adaptation rate.
    mu_decay : float
        Multiplicative decay of ``mu`` per bias update.
    update_every : int
        Number of batches accumulated before a bias update.
    renormalize_gates : bool
        Divide the gates by their sum over the selected experts.
    init_variance : float
        Variance of the router weights.
    rng : RngState, optional
        Random stream for the weights; zeros when omitted.
    """

    def __init__(self,
                 d_model: int,
                 n_ffn: int,
                 n_zero: int,
                 top_k: int,
                 k_expected: float,
                 mu: float = 1e-2,
                 mu_decay: float = 0.999,
                 update_every: int = 1,
                 renormalize_gates: bool = False,
                 init_variance: float = 1e-4,
                 rng=None):
        validate_router_dims(n_ffn, n_zero, top_k, k_expected)
        if mu < 0:
            raise ParameterError(f'mu must be non-negative, got {mu}')
        if not 0 < mu_decay <= 1:
            raise ParameterError(f'mu_decay must lie in (0, 1], got {mu_decay}')
        if update_every < 1:
            raise ParameterError(f'update_every must be >= 1, got {update_every}')
        self.d_model = d_model
        self.n_ffn = n_ffn
        self.n_zero = n_zero
        self.top_k = top_k
        self.k_expected = k_expected
        self.mu = float(mu)
        self.mu_decay = float(mu_decay)
        self.update_every = update_every
        self.renormalize_gates = renormalize_gates
        shape = (d_model, n_ffn + n_zero)
        if rng is None:
            weight = np.zeros(shape)
        else:
            weight = seeded_init(shape, 'truncated-normal', init_variance, rng).data
        self.weight = Parameter(weight, ParamClass.HIDDEN)
        self.bias = np.zeros(n_ffn + n_zero)
        self.counters = np.zeros(n_ffn + n_zero, dtype=np.int64)
        self.pending_tokens = 0
        self.pending_batches = 0

    @property
    def n_experts(self) -> int:
        return self.n_ffn + self.n_zero

    def expert_vectors(self) -> np.ndarray:
        """Router weight vector of every expert, one row per expert."""
        return self.weight.data.T

    def probabilities(self, x: Tensor) -> Tensor:
        return softmax(lift(x) @ self.weight, axis=-1)

    def record(self, decision: RoutingDecision):
        """Add a decision's expert loads to the counters of the current global batch."""
        self.counters += decision.expert_loads
        self.pending_tokens += decision.n_tokens

    def end_batch(self) -> Optional[np.ndarray]:
        """Close a batch; returns the bias change when an update was due."""
        self.pending_batches += 1
        if self.pending_batches < self.update_every:
            return None
        return bias_update(self, self.pending_tokens)

    def reset_bias(self):
        self.bias[:] = 0.0
        self.counters[:] = 0
        self.pending_tokens = 0
        self.pending_batches = 0


def route_topk(x, state: RouterState) -> RoutingDecision:
    """Route a token batch ``x`` of shape ``[T, d_model]``."""
    return select_experts(state.probabilities(x),
                          state.bias,
                          state.top_k,
                          state.n_ffn,
                          k_expected=state.k_expected,
                          renormalize=state.renormalize_gates)


def bias_update(state: RouterState, tokens: int) -> np.ndarray:
    """Apply one controller update from the accumulated counters.

    ``delta_i = mu * (K_e/(K*N) - T_i/(K*T_all))`` for FFN experts and zero for
    zero-computation experts. Afterwards ``mu`` decays and the counters reset.

    Returns
    -------
    numpy.ndarray
        The applied bias change.
    """
    if tokens <= 0:
        raise EmptyBatchError('bias_update needs at least one routed token')
    k, n = state.top_k, state.n_ffn
    if int(state.counters.sum()) != k * tokens:
        raise ParameterError(f'counters sum to {int(state.counters.sum())}, expected K*T_all={k * tokens}')
    delta = np.zeros(state.n_experts)
    delta[:n] = state.mu * (state.k_expected / (k * n) - state.counters[:n] / (k * tokens))
    state.bias += delta
    state.mu *= state.mu_decay
    state.counters[:] = 0
    state.pending_tokens = 0
    state.pending_batches = 0
    logger.debug(f'bias update over {tokens} tokens: max |delta|={np.abs(delta).max():.3e}, mu={state.mu:.3e}')
    return delta
