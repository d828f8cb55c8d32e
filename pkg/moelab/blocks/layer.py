"""Shortcut-connected MoE layer.

Wiring (pre-normalisation on every block)::

    h1  = h  + MLA_1(n(h))
    h2  = h1 + FFN(n(h1))
    h3  = h2 + MLA_2(n(h2))
    out = h3 + MoE(n(h1))         # shortcut: MoE reads the first attention output

The interleaved baseline has the same parameters but feeds the MoE from ``h3``.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ffn import DenseFFN, ExpertBank, moe_forward
from .mla import MLAKVCache, MLAParams
from .norm import RMSNorm
from ..diffcore import Module, Tensor, concat
from ..diffcore.tensor import lift
from ..errors import ParameterError
from ..routing.router import RouterState, RoutingDecision, route_topk

logger = logging.getLogger('moelab')


@dataclass
class LayerAux:
    """Routing information of one layer forward pass."""
    decision: RoutingDecision

    @property
    def probs(self) -> Tensor:
        return self.decision.probs


class ScMoELayer(Module):
    """Two attention blocks, a dense FFN path and a MoE block with a shortcut input.

    Parameters
    ----------
    attn1, attn2 : MLAParams
        First and second attention block.
    dense : DenseFFN
        Dense path between the attention blocks.
    router : RouterState
        Router of the MoE block.
    experts : ExpertBank
        FFN experts of the MoE block.
    shortcut : bool
        ``True`` for the shortcut wiring, ``False`` for the interleaved baseline.
    """

    def __init__(self, attn1: MLAParams, dense: DenseFFN, attn2: MLAParams, router: RouterState,
                 experts: ExpertBank, shortcut: bool = True, norm_eps: float = 1e-6):
        d_model = attn1.d_model
        self.norm_attn1 = RMSNorm(d_model, norm_eps)
        self.attn1 = attn1
        self.norm_dense = RMSNorm(d_model, norm_eps)
        self.dense = dense
        self.norm_attn2 = RMSNorm(d_model, norm_eps)
        self.attn2 = attn2
        self.norm_moe = RMSNorm(d_model, norm_eps)
        self.router = router
        self.experts = experts
        self.shortcut = shortcut

    def __call__(self, h, chunks: int = 1, caches=None):
        return scmoe_layer_forward(h, self, chunks=chunks, caches=caches)


def _token_chunks(n_tokens: int, chunks: int):
    if chunks < 1:
        raise ParameterError(f'chunks must be >= 1, got {chunks}')
    bounds = np.linspace(0, n_tokens, min(chunks, max(n_tokens, 1)) + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _moe_branch(layer: ScMoELayer, x: Tensor, chunks: int):
    """MoE over flat tokens ``x`` (``[T, d_model]``); experts run in token chunks of one routing decision."""
    decision = route_topk(x, layer.router)
    bounds = _token_chunks(x.shape[0], chunks)
    if len(bounds) == 1:
        return moe_forward(x, decision, layer.experts), decision
    parts = [moe_forward(x[start:stop], decision.rows(start, stop), layer.experts) for start, stop in bounds]
    return concat(parts, axis=0), decision


def _dense_branch(layer: ScMoELayer, x: Tensor, chunks: int) -> Tensor:
    parts = [layer.dense(layer.norm_dense(x[start:stop])) for start, stop in _token_chunks(x.shape[0], chunks)]
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def scmoe_layer_forward(h, layer: ScMoELayer, chunks: int = 1, caches: Optional[tuple] = None):
    """Run one layer on ``h`` of shape ``[B, T, d_model]`` (or ``[T, d_model]``).

    ``chunks`` splits the dense and MoE branches along the token dimension;
    the result does not depend on it. ``caches`` is an optional pair of
    :class:`MLAKVCache` for incremental decoding.

    Returns
    -------
    (Tensor, LayerAux)
        Layer output with the input's shape and the routing record.
    """
    h = lift(h)
    shape = h.shape
    d_model = shape[-1]
    cache1, cache2 = caches if caches is not None else (None, None)
    h1 = h + layer.attn1(layer.norm_attn1(h), kv_cache=cache1)
    flat1 = h1.reshape(-1, d_model)
    if layer.shortcut:
        moe_out, decision = _moe_branch(layer, layer.norm_moe(flat1), chunks)
    h2 = h1 + _dense_branch(layer, flat1, chunks).reshape(shape)
    h3 = h2 + layer.attn2(layer.norm_attn2(h2), kv_cache=cache2)
    if not layer.shortcut:
        moe_out, decision = _moe_branch(layer, layer.norm_moe(h3.reshape(-1, d_model)), chunks)
    out = h3 + moe_out.reshape(shape)
    return out, LayerAux(decision)


def interleaved_layer_forward(h, layer: ScMoELayer, chunks: int = 1):
    """Forward pass of ``layer``'s parameters with the MoE fed from the second attention output."""
    shortcut = layer.shortcut
    layer.shortcut = False
    try:
        return scmoe_layer_forward(h, layer, chunks=chunks)
    finally:
        layer.shortcut = shortcut


def new_kv_caches() -> tuple:
    return MLAKVCache(), MLAKVCache()
