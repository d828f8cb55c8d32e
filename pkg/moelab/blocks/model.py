"""Byte-level MoE language model assembled from the blocks of this package."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional

import numpy as np

from .config import ModelConfig
from .ffn import DenseFFN, ExpertBank
from .init import init_parameter
from .layer import LayerAux, ScMoELayer
from .mla import MLAParams
from .mtp import MTPHead, mtp_loss
from .norm import RMSNorm
from ..diffcore import Module, ParamClass, Tensor
from ..errors import DimensionError
from ..routing.router import RouterState

logger = logging.getLogger('moelab')

DEFAULT_INIT_VARIANCE = {ParamClass.EMBEDDING: 1e-2,
                         ParamClass.HIDDEN: 4e-4,
                         ParamClass.UNEMBEDDING: 1e-4}


@dataclass
class ModelOutput:
    logits: Tensor
    hidden: Tensor
    aux: List[LayerAux]


def _spawn(rng, *keys):
    return None if rng is None else rng.spawn(*keys)


def build_layer(config: ModelConfig, variance: float, rng=None, mu: float = 1e-2, mu_decay: float = 0.999,
                update_every: int = 1) -> ScMoELayer:
    """One layer as described by ``config``; zero weights when ``rng`` is None."""
    def attention(key):
        return MLAParams(config.d_model, config.d_q, config.d_kv, config.n_heads, config.head_dim,
                         config.rope_dim, variance_alignment=config.variance_alignment,
                         latent_norm=config.latent_norm, rope_base=config.rope_base,
                         init_variance=variance, rng=_spawn(rng, key), norm_eps=config.norm_eps)

    router = RouterState(config.d_model, config.n_ffn_experts, config.n_zero_experts, config.top_k,
                         config.k_expected, mu=mu, mu_decay=mu_decay, update_every=update_every,
                         renormalize_gates=config.renormalize_gates, init_variance=variance,
                         rng=_spawn(rng, 3))
    experts = ExpertBank(config.d_model, config.n_ffn_experts, config.expert_inter,
                         segmentation=config.segmentation, compensate=config.gamma_compensation,
                         gamma_scope=config.gamma_scope, init_variance=variance, rng=_spawn(rng, 4))
    return ScMoELayer(attention(0),
                      DenseFFN(config.d_model, config.dense_inter, variance, _spawn(rng, 1)),
                      attention(2),
                      router,
                      experts,
                      shortcut=config.shortcut,
                      norm_eps=config.norm_eps)


class MoELanguageModel(Module):
    """Embedding, a stack of MoE layers, final RMSNorm, unembedding and an optional MTP head.

    Parameters
    ----------
    config : ModelConfig
        Architecture.
    init_variance : mapping, optional
        Initial variance per :class:`ParamClass`.
    rng : RngState, optional
        Random stream for initialisation; zero weights when omitted.
    controller : mapping, optional
        ``mu``, ``mu_decay`` and ``update_every`` of the router bias controllers.
    """

    def __init__(self, config: ModelConfig, init_variance: Optional[Mapping] = None, rng=None,
                 controller: Optional[Mapping] = None):
        config.check()
        variance = dict(DEFAULT_INIT_VARIANCE)
        if init_variance:
            variance.update({ParamClass(k): v for k, v in init_variance.items()})
        self.config = config
        self.embedding = init_parameter((config.vocab_size, config.d_model), variance[ParamClass.EMBEDDING],
                                        _spawn(rng, 0), ParamClass.EMBEDDING)
        self.layers = [build_layer(config, variance[ParamClass.HIDDEN], _spawn(rng, 1, i), **(controller or {}))
                       for i in range(config.n_layers)]
        self.final_norm = RMSNorm(config.d_model, config.norm_eps)
        self.unembedding = init_parameter((config.d_model, config.vocab_size), variance[ParamClass.UNEMBEDDING],
                                          _spawn(rng, 2), ParamClass.UNEMBEDDING)
        self.mtp = MTPHead(config.d_model, config.mtp_inter, variance[ParamClass.HIDDEN], _spawn(rng, 3),
                           config.norm_eps) if config.use_mtp else None

    @property
    def routers(self) -> List[RouterState]:
        return [layer.router for layer in self.layers]

    def forward_layers(self, h, chunks: Optional[int] = None):
        """Apply the layer stack to hidden states ``h``; returns ``(h, aux)``."""
        chunks = self.config.chunks if chunks is None else chunks
        aux = []
        for layer in self.layers:
            h, layer_aux = layer(h, chunks=chunks)
            aux.append(layer_aux)
        return h, aux

    def __call__(self, tokens: np.ndarray, record_routing: bool = False) -> ModelOutput:
        """Logits for byte ``tokens`` of shape ``[B, S]``.

        With ``record_routing`` the expert loads are added to the router counters.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f'tokens must have shape [B, S], got {tokens.shape}')
        hidden, aux = self.forward_layers(self.embedding[tokens])
        if record_routing:
            for layer, layer_aux in zip(self.layers, aux):
                layer.router.record(layer_aux.decision)
        logits = self.final_norm(hidden) @ self.unembedding
        return ModelOutput(logits=logits, hidden=hidden, aux=aux)

    def mtp_loss(self, hidden: Tensor, window: np.ndarray) -> Optional[Tensor]:
        """Auxiliary loss of the MTP head for a ``[B, S+1]`` token window, None without a head."""
        if self.mtp is None:
            return None
        return mtp_loss(hidden, window, self.mtp, self.embedding, self.unembedding)


@dataclass
class ParameterReport:
    total: int
    per_layer: int
    per_expert: int
    activated_min: int
    activated_expected: float
    activated_max: int
    mtp: int
    mtp_ratio: float

    def as_dict(self) -> Dict:
        return dict(self.__dict__)


def parameter_report(model: MoELanguageModel) -> ParameterReport:
    """Total and per-token activated parameter counts.

    Activated counts take every non-expert parameter plus, per layer, 0
    (min), ``K_e`` (expected) or ``K`` (max) FFN experts. ``mtp_ratio`` is the
    size of the MTP head relative to one layer.
    """
    config = model.config
    layer = model.layers[0]
    per_expert = layer.experts.num_parameters() // layer.experts.n_experts
    expert_total = sum(l.experts.num_parameters() for l in model.layers)
    mtp = model.mtp.num_parameters() if model.mtp is not None else 0
    base = model.num_parameters() - expert_total - mtp
    n_layers = len(model.layers)
    return ParameterReport(total=model.num_parameters(),
                           per_layer=layer.num_parameters(),
                           per_expert=per_expert,
                           activated_min=base,
                           activated_expected=base + n_layers * config.k_expected * per_expert,
                           activated_max=base + n_layers * min(config.top_k, config.n_ffn_experts) * per_expert,
                           mtp=mtp,
                           mtp_ratio=mtp / layer.num_parameters())
