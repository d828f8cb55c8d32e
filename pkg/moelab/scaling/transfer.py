"""Width transfer of per-class initialisation variance and learning rate.

A narrow proxy model is tuned, then its hyperparameters are mapped onto a
model ``s`` times wider. Embeddings keep their proxy values; hidden and
unembedding parameters divide both the variance and the Adam learning rate by
``s``. Depth, sparsity and batch size are not touched.

The proxy values are kept as they are and only the cumulative width factor
changes, so ``transfer(transfer(c, s1), s2)`` and ``transfer(c, s1*s2)`` are
the same configuration.
"""
import logging
from typing import Dict

from pydantic import BaseModel, ConfigDict, Field

from ..blocks.config import ModelConfig
from ..config import PYDANTIC_EXTRA
from ..diffcore import ParamClass
from ..errors import ParameterError
from ..stability.optim import SCHEDULES

logger = logging.getLogger('moelab')

#: model dimensions multiplied by the width factor
WIDTH_DIMS = ('d_model', 'd_q', 'd_kv', 'dense_inter', 'expert_inter', 'head_dim', 'mtp_inter')

#: parameter classes whose variance and learning rate are divided by the width factor
WIDTH_SCALED = (ParamClass.HIDDEN, ParamClass.UNEMBEDDING)


def _per_class(embedding: float, hidden: float, unembedding: float) -> Dict[ParamClass, float]:
    return {ParamClass.EMBEDDING: embedding,
            ParamClass.HIDDEN: hidden,
            ParamClass.UNEMBEDDING: unembedding}


class OptimConfig(BaseModel):
    """Adam hyperparameters with proxy per-class ``(init_variance, lr)`` and the width factor."""
    model_config = ConfigDict(validate_assignment=True, extra=PYDANTIC_EXTRA)

    init_variance: Dict[ParamClass, float] = Field(default_factory=lambda: _per_class(1e-2, 4e-4, 1e-4))
    lr: Dict[ParamClass, float] = Field(default_factory=lambda: _per_class(3e-3, 3e-3, 3e-3))
    width_factor: float = Field(default=1.0, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-16, gt=0)
    schedule: str = 'constant'
    min_lr_ratio: float = Field(default=0.1, ge=0, le=1)

    def check(self):
        missing = set(ParamClass) - set(self.init_variance) | set(ParamClass) - set(self.lr)
        if missing:
            raise ParameterError(f'missing per-class values for {sorted(c.value for c in missing)}')
        if any(v < 0 for v in self.init_variance.values()) or any(v < 0 for v in self.lr.values()):
            raise ParameterError('per-class variances and learning rates must be non-negative')
        if self.schedule not in SCHEDULES:
            raise ParameterError(f'unknown schedule "{self.schedule}", expected one of {SCHEDULES}')
        return self

    def _effective(self, values: Dict[ParamClass, float]) -> Dict[ParamClass, float]:
        return {c: values[c] / self.width_factor if c in WIDTH_SCALED else values[c] for c in ParamClass}

    def effective_init_variance(self) -> Dict[ParamClass, float]:
        """Initial variance per class at the current width."""
        return self._effective(self.init_variance)

    def effective_lr(self) -> Dict[ParamClass, float]:
        """Learning rate per class at the current width."""
        return self._effective(self.lr)


def _scale_dim(name: str, value: int, s: float) -> int:
    scaled = value * s
    if scaled != int(scaled) or scaled < 1:
        raise ParameterError(f'width factor {s} turns {name}={value} into the non-integral width {scaled}')
    return int(scaled)


def transfer_optim(optim: OptimConfig, s: float) -> OptimConfig:
    if not s > 0:
        raise ParameterError(f'width factor must be positive, got {s}')
    return optim.model_copy(update={'width_factor': optim.width_factor * s}, deep=True)


def transfer_model(model: ModelConfig, s: float) -> ModelConfig:
    if not s > 0:
        raise ParameterError(f'width factor must be positive, got {s}')
    return model.model_copy(update={name: _scale_dim(name, getattr(model, name), s) for name in WIDTH_DIMS})


def transfer_hparams(config, s: float):
    """Map a proxy configuration onto a model ``s`` times wider.

    Parameters
    ----------
    config : OptimConfig, ModelConfig or a config holding ``model`` and ``optim``
        Proxy configuration.
    s : float
        Width factor ``n_target / n_proxy``.

    Returns
    -------
    A new configuration of the same type.
    """
    if not s > 0:
        raise ParameterError(f'width factor must be positive, got {s}')
    if isinstance(config, OptimConfig):
        return transfer_optim(config, s)
    if isinstance(config, ModelConfig):
        return transfer_model(config, s)
    target = config.model_copy(update={'model': transfer_model(config.model, s),
                                       'optim': transfer_optim(config.optim, s)}, deep=True)
    logger.debug(f'transferred configuration by s={s}: d_model {config.model.d_model} -> {target.model.d_model}')
    return target
