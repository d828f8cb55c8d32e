"""Trainable parameters and a minimal container for them."""
from enum import Enum
from typing import Dict, Iterator, List, Tuple

import numpy as np

from .tensor import Tensor


class ParamClass(str, Enum):
    """Parameter classes with separate initialisation and learning-rate rules."""
    EMBEDDING = 'embedding'
    HIDDEN = 'hidden'
    UNEMBEDDING = 'unembedding'


class Parameter(Tensor):
    """A leaf tensor that always requires gradients and carries a class label."""

    def __init__(self, data, param_class=ParamClass.HIDDEN):
        super().__init__(data, requires_grad=True)
        self.param_class = ParamClass(param_class)

    def __repr__(self):
        return f'Parameter(shape={self.shape}, class={self.param_class.value})'

    @property
    def gradient(self) -> np.ndarray:
        """The accumulated gradient, zeros if nothing was accumulated yet."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


class Module:
    """Base class of model components.

    Parameters are discovered by walking instance attributes in definition
    order, descending into sub-modules and lists of them.
    """

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield f'{prefix}{name}', value
            elif isinstance(value, Module):
                yield from value.named_parameters(f'{prefix}{name}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Parameter):
                        yield f'{prefix}{name}.{i}', item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f'{prefix}{name}.{i}.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_modules(self, prefix: str = '') -> Iterator[Tuple[str, 'Module']]:
        yield prefix.rstrip('.'), self
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_modules(f'{prefix}{name}.')
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_modules(f'{prefix}{name}.{i}.')

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f'Missing parameters in state: {missing}')
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f'Parameter "{name}" has shape {p.shape}, state has {value.shape}')
            p.data = value.astype(p.dtype, copy=True)
