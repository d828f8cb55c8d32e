"""Model building blocks: latent attention, FFN experts, shortcut MoE layers and the MTP head."""
from .config import ModelConfig
from .ffn import DenseFFN, ExpertBank, moe_forward, variance_gamma, moe_init_output_variance
from .layer import ScMoELayer, LayerAux, scmoe_layer_forward, interleaved_layer_forward, new_kv_caches
from .mla import (MLAParams, MLAKVCache, mla_forward, mla_scale_factors, mla_component_variances,
                  kv_cache_footprint)
from .model import MoELanguageModel, ModelOutput, build_layer, parameter_report, ParameterReport
from .mtp import MTPHead, MTPOutput, mtp_forward, mtp_loss
from .norm import RMSNorm, rms_norm

__all__ = ['ModelConfig', 'DenseFFN', 'ExpertBank', 'moe_forward', 'variance_gamma',
           'moe_init_output_variance', 'ScMoELayer', 'LayerAux', 'scmoe_layer_forward',
           'interleaved_layer_forward', 'new_kv_caches', 'MLAParams', 'MLAKVCache', 'mla_forward',
           'mla_scale_factors', 'mla_component_variances', 'kv_cache_footprint', 'MoELanguageModel',
           'ModelOutput', 'build_layer', 'parameter_report', 'ParameterReport', 'MTPHead', 'MTPOutput',
           'mtp_forward', 'mtp_loss', 'RMSNorm', 'rms_norm']
