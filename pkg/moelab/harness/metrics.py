"""Per-step metrics records and their JSON-lines file."""
import logging
import pathlib
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict

from ..config import PYDANTIC_EXTRA
from ..errors import StateError

logger = logging.getLogger('moelab')


class MetricsRecord(BaseModel):
    """One training step.

    ``mtp_loss`` is unweighted; ``total_loss`` is
    ``lm_loss + lb_loss + z_loss + mtp_weight * mtp_loss``. ``R_g`` is None
    when the LM gradient on the mean routing probabilities vanishes.
    ``wall_clock`` stays None unless the run asks for it.
    """
    model_config = ConfigDict(extra=PYDANTIC_EXTRA)

    step: int
    lm_loss: float
    lb_loss: float
    z_loss: float
    mtp_loss: Optional[float] = None
    total_loss: float
    hidden_norm: float
    max_abs_activation: float
    grad_rms_min: float
    grad_rms_max: float
    mean_ffn_activated: float
    std_ffn_activated: float
    R_g: Optional[float] = None
    R_g_ema: Optional[float] = None
    router_sim: float
    lr_scale: float
    step_applied: bool = True
    tag: str = 'run'
    wall_clock: Optional[float] = None


class MetricsWriter:
    """Append-only JSONL sink; step numbers must increase."""

    def __init__(self, filename: Union[str, pathlib.Path]):
        self.filename = pathlib.Path(filename)
        self.filename.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.filename, 'w', encoding='utf-8', newline='\n')
        self.last_step: Optional[int] = None
        self.n_records = 0

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.close()

    def write(self, record: MetricsRecord):
        if self.last_step is not None and record.step <= self.last_step:
            raise StateError(f'metrics step {record.step} does not follow step {self.last_step}')
        self._file.write(record.model_dump_json() + '\n')
        self._file.flush()
        self.last_step = record.step
        self.n_records += 1

    def close(self):
        if not self._file.closed:
            self._file.close()


def read_metrics(filename: Union[str, pathlib.Path]) -> List[MetricsRecord]:
    with open(filename, 'r', encoding='utf-8') as f:
        return [MetricsRecord.model_validate_json(line) for line in f if line.strip()]
