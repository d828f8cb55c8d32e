"""Model growth by stacking copies of a trained shallow model.

A model with layers ``[l1..ln]`` grows into ``[l1..ln, l1..ln, ...]`` (``r``
repetitions). Embedding, unembedding and the MTP head are kept once.
"""
import copy
import logging
import pathlib
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from ..blocks.config import ModelConfig
from ..blocks.model import MoELanguageModel
from ..errors import ConfigurationError, ParameterError
from ..routing.controller import running_mean
from ..stability.optim import AdamState, TrainState

logger = logging.getLogger('moelab')

_LAYER_NAME = re.compile(r'^layers\.(\d+)\.(.*)$')


@dataclass
class GrowthPlan:
    """How to grow a model.

    Attributes
    ----------
    rate : int
        Expansion rate ``r``; the grown model has ``r`` times the layers.
    reset_moments : bool
        Start Adam from zero moments (the bias correction restarts too);
        otherwise the moments are duplicated with the layers.
    reset_router_bias : bool
        Zero the expert biases instead of duplicating them.
    source : str, optional
        Checkpoint the plan is applied to.
    """
    rate: int = 2
    reset_moments: bool = True
    reset_router_bias: bool = False
    source: Optional[str] = None

    def __post_init__(self):
        if int(self.rate) != self.rate or self.rate < 1:
            raise ParameterError(f'growth rate must be an integer >= 1, got {self.rate}')
        self.rate = int(self.rate)


def grow_config(config: ModelConfig, rate: int) -> ModelConfig:
    return config.model_copy(update={'n_layers': config.n_layers * rate})


def _check_uniform(model: MoELanguageModel):
    reference = [(name, p.shape) for name, p in model.layers[0].named_parameters()]
    for i, layer in enumerate(model.layers[1:], start=1):
        if [(name, p.shape) for name, p in layer.named_parameters()] != reference:
            raise ConfigurationError(f'layer {i} differs in structure from layer 0, cannot stack')


def stack_grow(model: MoELanguageModel, plan: GrowthPlan) -> MoELanguageModel:
    """Return a new model whose layer sequence is ``plan.rate`` deep copies of ``model.layers``.

    Parameter classes, router biases and controller rates are copied with the
    layers; ``model`` itself is not modified.
    """
    _check_uniform(model)
    layers = model.layers
    model.layers = []
    try:
        grown = copy.deepcopy(model)
    finally:
        model.layers = layers
    grown.layers = [copy.deepcopy(layer) for _ in range(plan.rate) for layer in layers]
    grown.config = grow_config(model.config, plan.rate)
    grown.zero_grad()
    if plan.reset_router_bias:
        for router in grown.routers:
            router.reset_bias()
    logger.debug(f'grew model from {len(layers)} to {len(grown.layers)} layers')
    return grown


def grown_parameter_names(name: str, n_layers: int, rate: int) -> List[str]:
    """Names of the copies of parameter ``name`` after growing ``n_layers`` layers ``rate`` times."""
    match = _LAYER_NAME.match(name)
    if match is None:
        return [name]
    index, rest = int(match.group(1)), match.group(2)
    return [f'layers.{index + k * n_layers}.{rest}' for k in range(rate)]


def grow_train_state(state: TrainState, plan: GrowthPlan, n_layers: int) -> TrainState:
    """Carry the sample counter and schedule position over; reset or duplicate the Adam moments."""
    old = state.adam
    adam = AdamState(beta1=old.beta1, beta2=old.beta2, eps=old.eps)
    if not plan.reset_moments:
        adam.step = old.step
        for name in old.m:
            for new_name in grown_parameter_names(name, n_layers, plan.rate):
                adam.m[new_name] = old.m[name].copy()
                adam.v[new_name] = old.v[name].copy()
    return TrainState(step=state.step, samples=state.samples, adam=adam)


def detect_crossover(grown: np.ndarray, baseline: np.ndarray, window: int = 10) -> Optional[int]:
    """First step from which the smoothed ``grown`` curve lies below the smoothed ``baseline`` for good."""
    g = running_mean(np.asarray(grown, dtype=float), window)
    b = running_mean(np.asarray(baseline, dtype=float), window)
    below = g < b
    if not below[-1]:
        return None
    above = np.nonzero(~below)[0]
    return 0 if above.size == 0 else int(above[-1] + 1)


@dataclass
class GrowthReport:
    seeds: List[int]
    random_curves: List[np.ndarray] = field(default_factory=list)
    grown_curves: List[np.ndarray] = field(default_factory=list)
    small_final_losses: List[float] = field(default_factory=list)
    grown_initial_losses: List[float] = field(default_factory=list)
    initial_rise: List[bool] = field(default_factory=list)
    crossover_steps: List[Optional[int]] = field(default_factory=list)

    @property
    def crossed(self) -> int:
        return sum(step is not None for step in self.crossover_steps)

    @property
    def holds(self) -> bool:
        """Grown curve ends below the random-init curve in at least two thirds of the seeds."""
        return 3 * self.crossed >= 2 * len(self.seeds)

    def as_dict(self) -> Dict:
        return {'seeds': self.seeds,
                'random_final': [float(c[-1]) for c in self.random_curves],
                'grown_final': [float(c[-1]) for c in self.grown_curves],
                'small_final_losses': self.small_final_losses,
                'grown_initial_losses': self.grown_initial_losses,
                'initial_rise': self.initial_rise,
                'crossover_steps': self.crossover_steps,
                'holds': self.holds}


def growth_experiment(config,
                      budget: int,
                      seeds: Sequence[int] = (0, 1, 2),
                      small_steps: Optional[int] = None,
                      plan: Optional[GrowthPlan] = None,
                      out_dir: Optional[Union[str, pathlib.Path]] = None,
                      window: int = 10) -> GrowthReport:
    """Compare random initialisation with growth from a model ``plan.rate`` times shallower.

    ``config`` (a :class:`~moelab.harness.config.RunConfig`) describes the
    target model. Per seed, the shallow model trains ``small_steps`` steps and
    is grown; both target-size arms then train ``budget`` steps on the same
    schedule.
    """
    from ..harness.train import train_run

    plan = plan or GrowthPlan()
    if config.model.n_layers % plan.rate:
        raise ConfigurationError(f'{config.model.n_layers} layers cannot be grown at rate {plan.rate}')
    small_steps = budget if small_steps is None else small_steps
    out_dir = pathlib.Path(out_dir) if out_dir is not None else None
    report = GrowthReport(seeds=list(seeds))
    for seed in seeds:
        def _cfg(tag, steps, n_layers):
            return config.model_copy(update={
                'seed': seed,
                'tag': tag,
                'model': config.model.model_copy(update={'n_layers': n_layers}),
                'schedule': config.schedule.model_copy(update={'steps': steps})}, deep=True)

        def _dir(tag):
            return None if out_dir is None else out_dir / f'{tag}-seed{seed}'

        target = _cfg('random-init', budget, config.model.n_layers)
        random_run = train_run(target, _dir('random-init'))
        small = train_run(_cfg('small', small_steps, config.model.n_layers // plan.rate), _dir('small'))
        grown_model = stack_grow(small.model, plan)
        grown_state = grow_train_state(small.state, plan, len(small.model.layers))
        grown_cfg = _cfg('grown-init', budget, config.model.n_layers)
        grown_run = train_run(grown_cfg, _dir('grown-init'), model=grown_model, state=grown_state)

        grown_curve = grown_run.lm_curve
        report.random_curves.append(random_run.lm_curve)
        report.grown_curves.append(grown_curve)
        report.small_final_losses.append(float(small.records[-1].lm_loss))
        report.grown_initial_losses.append(float(grown_curve[0]))
        report.initial_rise.append(bool(grown_curve[:max(1, budget // 10)].max() > grown_curve[0]))
        report.crossover_steps.append(detect_crossover(grown_curve, random_run.lm_curve, window))
        logger.info(f'growth experiment seed {seed}: crossover at {report.crossover_steps[-1]}')
    return report
