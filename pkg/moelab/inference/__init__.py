"""Speculative decoding, KV allocation and TPOT analytics."""
from .acceptance import AcceptanceResult, measure_acceptance
from .kvalloc import KVTrace, SAMPLERS, kv_alloc_simulate, kv_bounds, make_sampler
from .specdec import (AcceptSimulation, SpecDecParams, expected_accept_length, simulate_accept_lengths,
                      specdec_cost_ratio)
from .tpot import COST_PRESETS, CostModel, TPOTResult, layer_time_us, load_cost_model, tpot_theoretical

__all__ = ['AcceptanceResult', 'measure_acceptance', 'KVTrace', 'SAMPLERS', 'kv_alloc_simulate', 'kv_bounds',
           'make_sampler', 'AcceptSimulation', 'SpecDecParams', 'expected_accept_length',
           'simulate_accept_lengths', 'specdec_cost_ratio', 'COST_PRESETS', 'CostModel', 'TPOTResult',
           'layer_time_us', 'load_cost_model', 'tpot_theoretical']
