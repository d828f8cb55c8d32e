"""Dense multi-token prediction head.

From the final hidden state at position ``t`` and the embedding of token
``t+1`` the head predicts token ``t+2``. Embedding and unembedding are shared
with the main model.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ffn import DenseFFN
from .init import init_parameter
from .norm import RMSNorm
from ..diffcore import Module, Parameter, Tensor, concat, cross_entropy
from ..diffcore.tensor import lift

logger = logging.getLogger('moelab')


class MTPHead(Module):
    """Projection of ``[n(h_t); n(emb(x_{t+1}))]`` followed by one dense residual FFN."""

    def __init__(self, d_model: int, d_inter: int, init_variance: float = 4e-4, rng=None, norm_eps: float = 1e-6):
        self.norm_hidden = RMSNorm(d_model, norm_eps)
        self.norm_embed = RMSNorm(d_model, norm_eps)
        self.w_proj = init_parameter((2 * d_model, d_model), init_variance, rng)
        self.norm_ffn = RMSNorm(d_model, norm_eps)
        self.ffn = DenseFFN(d_model, d_inter, init_variance, rng)
        self.norm_out = RMSNorm(d_model, norm_eps)


@dataclass
class MTPOutput:
    logits: Optional[Tensor]
    skipped: bool = False


def mtp_forward(hidden, next_tokens: np.ndarray, head: MTPHead, embedding: Parameter,
                unembedding: Parameter) -> MTPOutput:
    """Logits for position ``t+2`` from ``hidden`` (``[B, L, d]``) and tokens ``t+1`` (``[B, L]``).

    Skipped (``logits=None``) when there is no position to predict.
    """
    hidden = lift(hidden)
    next_tokens = np.asarray(next_tokens, dtype=np.int64)
    if hidden.ndim < 2 or hidden.shape[-2] < 1 or next_tokens.size == 0:
        logger.warning('sequence too short for the multi-token prediction shift, skipping the MTP head')
        return MTPOutput(None, skipped=True)
    x = concat([head.norm_hidden(hidden), head.norm_embed(embedding[next_tokens])], axis=-1) @ head.w_proj
    x = x + head.ffn(head.norm_ffn(x))
    return MTPOutput(head.norm_out(x) @ unembedding)


def mtp_loss(hidden, tokens: np.ndarray, head: MTPHead, embedding: Parameter,
             unembedding: Parameter) -> Optional[Tensor]:
    """Cross-entropy of the head on a window ``tokens`` (``[B, S+1]``) whose inputs produced ``hidden`` (``[B, S, d]``).

    Position ``t`` predicts ``tokens[:, t+2]``; returns None when ``S < 2``.
    """
    hidden = lift(hidden)
    tokens = np.asarray(tokens, dtype=np.int64)
    length = hidden.shape[1]
    if length < 2:
        mtp_forward(hidden[:, :0], tokens[:, :0], head, embedding, unembedding)
        return None
    out = mtp_forward(hidden[:, :length - 1], tokens[:, 1:length], head, embedding, unembedding)
    return cross_entropy(out.logits, tokens[:, 2:length + 1])
