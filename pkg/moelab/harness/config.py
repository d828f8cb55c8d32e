"""Run configuration: one pydantic tree, serialised as JSON."""
import logging
import pathlib
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from .corpus import BYTE_VOCAB
from ..blocks.config import ModelConfig
from ..config import JSON_INDENT, PYDANTIC_EXTRA
from ..errors import ConfigurationError
from ..routing.balance import LBLossConfig, ZERO_GROUP_COUNTS
from ..scaling.transfer import OptimConfig

logger = logging.getLogger('moelab')


class _Section(BaseModel):
    model_config = ConfigDict(validate_assignment=True, extra=PYDANTIC_EXTRA)


class LossConfig(_Section):
    """Weights of the total loss ``L_LM + L_LB + L_Z + mtp_weight * L_MTP``.

    ``alpha`` (balance loss) and ``zloss_lambda`` are independent scalars.
    """
    alpha: float = Field(default=1e-3, ge=0)
    n_groups: int = Field(default=1, ge=1)
    zero_group_count: str = 'per_slot'
    zloss_lambda: float = Field(default=1e-5, ge=0)
    mtp_weight: float = Field(default=0.1, ge=0)

    def lb(self) -> LBLossConfig:
        return LBLossConfig(alpha=self.alpha, n_groups=self.n_groups, zero_group_count=self.zero_group_count)


class ControllerConfig(_Section):
    mu: float = Field(default=1e-2, ge=0)
    mu_decay: float = Field(default=0.999, gt=0, le=1)
    update_every: int = Field(default=1, ge=1)


class ScheduleConfig(_Section):
    steps: int = Field(default=200, ge=1)
    batch_size: int = Field(default=8, ge=1)
    seq_len: int = Field(default=64, ge=2)
    warmup: int = Field(default=0, ge=0)
    #: 0 writes only the final checkpoint
    checkpoint_every: int = Field(default=0, ge=0)

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len


class RunConfig(_Section):
    """Everything a training run depends on.

    ``corpus`` is either a file path or ``'synthetic:<style>'`` with a style
    from :data:`moelab.harness.corpus.SYNTHETIC_STYLES`.
    """
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    controller: ControllerConfig = Field(default_factory=ControllerConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    seed: int = Field(default=0, ge=0)
    corpus: str = 'synthetic:prose'
    corpus_bytes: int = Field(default=1 << 16, ge=1)
    valid_fraction: float = Field(default=0.1, ge=0, lt=1)
    out_dir: Optional[str] = None
    tag: str = 'run'
    record_wall_clock: bool = False

    def check(self) -> 'RunConfig':
        """Raise :class:`ConfigurationError` unless every section is consistent."""
        self.model.check()
        if self.model.vocab_size < BYTE_VOCAB:
            raise ConfigurationError(f'vocab_size ({self.model.vocab_size}) does not cover '
                                     f'the {BYTE_VOCAB} byte values')
        if self.loss.zero_group_count not in ZERO_GROUP_COUNTS:
            raise ConfigurationError(f'zero_group_count must be one of {ZERO_GROUP_COUNTS}')
        self.loss.lb().group_size(self.model.n_ffn_experts)
        try:
            self.optim.check()
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        if self.schedule.warmup > self.schedule.steps:
            raise ConfigurationError(f'warmup ({self.schedule.warmup}) exceeds the run length '
                                     f'({self.schedule.steps} steps)')
        return self

    def save(self, filename: Union[str, pathlib.Path]) -> pathlib.Path:
        filename = pathlib.Path(filename)
        filename.parent.mkdir(parents=True, exist_ok=True)
        with open(filename, 'w', encoding='utf-8') as f:
            f.write(self.model_dump_json(indent=JSON_INDENT))
        return filename

    @classmethod
    def load(cls, filename: Union[str, pathlib.Path]) -> 'RunConfig':
        with open(filename, 'r', encoding='utf-8') as f:
            return cls.model_validate_json(f.read())
