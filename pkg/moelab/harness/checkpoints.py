"""Model checkpoints: parameters, router state, optimizer moments and the run configuration."""
import logging
import pathlib
from dataclasses import dataclass
from typing import Union

import numpy as np

from .config import RunConfig
from ..blocks.model import MoELanguageModel
from ..diffcore import load_tensors, save_tensors
from ..stability.optim import AdamState, TrainState

logger = logging.getLogger('moelab')

CHECKPOINT_SUFFIX = '.npt'


@dataclass
class Checkpoint:
    config: RunConfig
    model: MoELanguageModel
    state: TrainState


def save_checkpoint(filename: Union[str, pathlib.Path], model: MoELanguageModel, state: TrainState,
                    config: RunConfig) -> pathlib.Path:
    """Write a checkpoint; the model architecture is taken from ``model.config``."""
    tensors = {f'param/{name}': p.data for name, p in model.named_parameters()}
    for i, router in enumerate(model.routers):
        tensors[f'router_bias/{i}'] = router.bias
    for name in state.adam.m:
        tensors[f'adam_m/{name}'] = state.adam.m[name]
        tensors[f'adam_v/{name}'] = state.adam.v[name]
    config = config.model_copy(update={'model': model.config})
    meta = {'config': config.model_dump(mode='json'),
            'train_state': {'step': state.step,
                            'samples': state.samples,
                            'adam': {'beta1': state.adam.beta1,
                                     'beta2': state.adam.beta2,
                                     'eps': state.adam.eps,
                                     'step': state.adam.step}},
            'routers': [{'mu': r.mu} for r in model.routers]}
    filename = save_tensors(filename, tensors, meta)
    logger.info(f'Checkpoint of step {state.step} written to {filename}')
    return filename


def load_checkpoint(filename: Union[str, pathlib.Path]) -> Checkpoint:
    tensors, meta = load_tensors(filename)
    config = RunConfig.model_validate(meta['config'])
    model = MoELanguageModel(config.model, controller=config.controller.model_dump())
    model.load_state_dict({name[len('param/'):]: v for name, v in tensors.items() if name.startswith('param/')})
    for i, (router, router_meta) in enumerate(zip(model.routers, meta['routers'])):
        router.bias = np.array(tensors[f'router_bias/{i}'], copy=True)
        router.mu = router_meta['mu']
    ts = meta['train_state']
    adam = AdamState(**ts['adam'])
    for name, value in tensors.items():
        if name.startswith('adam_m/'):
            adam.m[name[len('adam_m/'):]] = np.array(value, copy=True)
        elif name.startswith('adam_v/'):
            adam.v[name[len('adam_v/'):]] = np.array(value, copy=True)
    return Checkpoint(config=config, model=model, state=TrainState(step=ts['step'], samples=ts['samples'], adam=adam))
