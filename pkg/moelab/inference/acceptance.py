"""Empirical acceptance rate of a draft head against greedy target decoding."""
import logging
import math
from typing import Callable, NamedTuple, Optional

import numpy as np

from ..blocks.mtp import mtp_forward
from ..diffcore import Tensor, no_grad
from ..errors import ConfigurationError, EmptyBatchError

logger = logging.getLogger('moelab')

DraftFn = Callable[[Tensor, np.ndarray], Tensor]


class AcceptanceResult(NamedTuple):
    alpha: float
    matches: int
    positions: int

    @property
    def stderr(self) -> float:
        return math.sqrt(self.alpha * (1.0 - self.alpha) / self.positions)


def measure_acceptance(model, tokens: np.ndarray, draft_fn: Optional[DraftFn] = None) -> AcceptanceResult:
    """Fraction of draft tokens equal to the target model's greedy token.

    For every position ``t`` the draft sees the hidden state at ``t`` and
    token ``t+1`` and proposes token ``t+2``; the target's choice for ``t+2``
    is the argmax of its logits at ``t+1``.

    Parameters
    ----------
    model : MoELanguageModel
        Target model; its MTP head is the default draft.
    tokens : numpy.ndarray
        ``[B, L]`` (or ``[L]``) evaluation tokens, ``L >= 3``.
    draft_fn : callable, optional
        ``draft_fn(hidden[:, :L-1], tokens[:, 1:L])`` returning draft logits.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.size == 0 or tokens.shape[-1] < 3:
        raise EmptyBatchError(f'acceptance needs sequences of at least 3 tokens, got shape {tokens.shape}')
    if draft_fn is None:
        if model.mtp is None:
            raise ConfigurationError('model has no MTP head and no draft function was given')

        def draft_fn(hidden, next_tokens):
            return mtp_forward(hidden, next_tokens, model.mtp, model.embedding, model.unembedding).logits

    length = tokens.shape[1]
    with no_grad():
        out = model(tokens)
        draft = draft_fn(out.hidden[:, :length - 1], tokens[:, 1:length])
    draft_tokens = np.argmax(np.asarray(draft.data if isinstance(draft, Tensor) else draft), axis=-1)
    target_tokens = np.argmax(out.logits.data[:, 1:length], axis=-1)
    matches = int((draft_tokens == target_tokens).sum())
    positions = int(target_tokens.size)
    logger.debug(f'acceptance: {matches}/{positions} draft tokens match')
    return AcceptanceResult(alpha=matches / positions, matches=matches, positions=positions)
