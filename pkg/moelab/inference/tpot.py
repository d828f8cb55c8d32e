"""Theoretical time per output token and serving price from per-layer module latencies."""
import json
import logging
import pathlib
from typing import Dict, Mapping, NamedTuple, Union

from pydantic import BaseModel, ConfigDict, Field

from ..config import PYDANTIC_EXTRA
from ..errors import ConfigurationError

logger = logging.getLogger('moelab')

STRATEGIES = ('SBO', 'TBO')
LATENCY_KEYS = ('attention_us', 'dispatch_us', 'moe_us', 'combine_us')
REQUIRED_KEYS = LATENCY_KEYS + ('n_layer',)

COST_PRESETS: Dict[str, Dict] = {
    'deepseek-v3-tbo': {'attention_us': 471, 'dispatch_us': 275, 'moe_us': 77, 'combine_us': 551,
                        'n_layer': 61, 'accept_factor': 1.8, 'strategy': 'TBO'},
    'qwen3-235b-tbo': {'attention_us': 314, 'dispatch_us': 157, 'moe_us': 29, 'combine_us': 315,
                       'n_layer': 94, 'accept_factor': 1.8, 'strategy': 'TBO'},
    'scmoe-28l-sbo': {'attention_us': 264, 'dispatch_us': 236, 'moe_us': 60, 'combine_us': 472,
                      'n_layer': 28, 'accept_factor': 1.8, 'strategy': 'SBO'},
}


class CostModel(BaseModel):
    """Per-layer latencies in microseconds and serving assumptions."""
    model_config = ConfigDict(validate_assignment=True, extra=PYDANTIC_EXTRA)

    attention_us: float = Field(ge=0)
    dispatch_us: float = Field(ge=0)
    moe_us: float = Field(ge=0)
    combine_us: float = Field(ge=0)
    n_layer: int = Field(ge=1)
    accept_factor: float = Field(default=1.0, ge=1)
    strategy: str = 'SBO'
    price_per_hour: float = Field(default=2.0, ge=0)
    batch_per_device: int = Field(default=96, ge=1)

    @classmethod
    def from_dict(cls, data: Mapping) -> 'CostModel':
        """Build from a mapping; a missing latency is a :class:`ConfigurationError`."""
        missing = [k for k in REQUIRED_KEYS if k not in data]
        if missing:
            raise ConfigurationError(f'cost model lacks {missing}')
        if data.get('strategy', 'SBO') not in STRATEGIES:
            raise ConfigurationError(f'strategy must be one of {STRATEGIES}, got "{data["strategy"]}"')
        return cls.model_validate(dict(data))

    @classmethod
    def preset(cls, name: str) -> 'CostModel':
        if name not in COST_PRESETS:
            raise ConfigurationError(f'unknown cost preset "{name}", expected one of {sorted(COST_PRESETS)}')
        return cls.from_dict(COST_PRESETS[name])


def load_cost_model(source: Union[str, pathlib.Path, Mapping]) -> CostModel:
    """A cost model from a mapping, a JSON file or a preset name."""
    if isinstance(source, Mapping):
        return CostModel.from_dict(source)
    if str(source) in COST_PRESETS:
        return CostModel.preset(str(source))
    with open(source, 'r', encoding='utf-8') as f:
        return CostModel.from_dict(json.load(f))


class TPOTResult(NamedTuple):
    tpot_ms: float
    price_per_million: float
    layer_us: float
    strategy: str
    approximate: bool


def layer_time_us(cm: CostModel) -> float:
    """Time per layer: all four modules in sequence (SBO) or ``max(compute, communication)`` (TBO)."""
    if cm.strategy == 'SBO':
        return cm.attention_us + cm.dispatch_us + cm.moe_us + cm.combine_us
    if cm.strategy == 'TBO':
        return max(cm.attention_us + cm.moe_us, cm.dispatch_us + cm.combine_us)
    raise ConfigurationError(f'strategy must be one of {STRATEGIES}, got "{cm.strategy}"')


def tpot_theoretical(cm: CostModel) -> TPOTResult:
    """TPOT ``= n_layer * layer_time / (1000 * accept_factor)`` in ms and the price per 1M output tokens.

    The price is ``price_per_hour * TPOT_s / (batch_per_device * 3600) * 1e6``.
    TBO results are flagged approximate.
    """
    layer_us = layer_time_us(cm)
    tpot_ms = cm.n_layer * layer_us / (1000.0 * cm.accept_factor)
    price = cm.price_per_hour * (tpot_ms / 1000.0) / (cm.batch_per_device * 3600.0) * 1e6
    approximate = cm.strategy == 'TBO'
    if approximate:
        logger.warning('TBO layer time modelled as max(compute, communication); the TPOT is approximate')
    return TPOTResult(tpot_ms=tpot_ms, price_per_million=price, layer_us=layer_us, strategy=cm.strategy,
                      approximate=approximate)
