"""Adam with a configurable epsilon and per-class learning rates."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Union

import numpy as np

from ..diffcore import Parameter, ParamClass
from ..errors import ParameterError

logger = logging.getLogger('moelab')

SCHEDULES = ('constant', 'cosine')


@dataclass
class AdamState:
    """First and second moments per parameter name, hyperparameters and the step counter."""
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError(f'betas must lie in [0, 1), got ({self.beta1}, {self.beta2})')
        if self.eps <= 0:
            raise ParameterError(f'eps must be positive, got {self.eps}')

    def reset(self):
        """Drop the moments, keep hyperparameters and the step counter."""
        self.m.clear()
        self.v.clear()


class AdamStepResult(NamedTuple):
    applied: bool
    nonfinite: List[str]


LearningRate = Union[float, Mapping[Union[str, ParamClass], float]]


def _rate(lr: LearningRate, param: Parameter) -> float:
    if isinstance(lr, Mapping):
        if param.param_class in lr:
            return lr[param.param_class]
        return lr[param.param_class.value]
    return lr


def adam_step(state: AdamState, params: Mapping[str, Parameter], lr: LearningRate) -> AdamStepResult:
    """One bias-corrected Adam update ``theta -= lr * m_hat / (sqrt(v_hat) + eps)`` in place.

    A non-finite gradient aborts the step: nothing changes and the offending
    parameter names are returned.
    """
    grads = {name: p.gradient for name, p in params.items()}
    bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        logger.warning(f'non-finite gradients in {bad}, skipping optimizer step {state.step + 1}')
        return AdamStepResult(False, bad)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        p.data = p.data - _rate(lr, p) * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return AdamStepResult(True, [])


def lr_schedule(step: int, warmup: int, total: int, kind: str = 'constant', min_ratio: float = 0.1) -> float:
    """Learning-rate multiplier: linear warm-up, then constant or cosine decay to ``min_ratio``."""
    if kind not in SCHEDULES:
        raise ParameterError(f'unknown schedule "{kind}", expected one of {SCHEDULES}')
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if kind == 'constant' or total <= warmup:
        return 1.0
    progress = min(1.0, (step - warmup) / max(1, total - warmup))
    return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))


class Adam:
    """Adam over named parameters with one learning rate per parameter class."""

    def __init__(self, named_params, lr: LearningRate, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-16):
        self.params = dict(named_params)
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def step(self, scale: float = 1.0) -> AdamStepResult:
        if isinstance(self.lr, Mapping):
            lr = {k: v * scale for k, v in self.lr.items()}
        else:
            lr = self.lr * scale
        return adam_step(self.state, self.params, lr)


@dataclass
class TrainState:
    """Schedule position and sample counter of a run together with the optimizer state.

    ``step`` drives the learning-rate schedule; ``adam.step`` drives Adam's bias
    correction and restarts when the moments are reset.
    """
    step: int = 0
    samples: int = 0
    adam: AdamState = field(default_factory=AdamState)
