"""KV-slot availability under a multi-step overlapped scheduler with MTP drafts.

Per scheduler iteration ``i`` each of ``n`` steps ``s`` accepts
``U[i, s]`` tokens (between 1 and ``MTP + 1``). With ``S_i = sum_s U[i, s]``::

    A_i = S_{i-1},   S_{-1} = (MTP + 1) * n
    R_0 = (MTP + 1) * n
    R_i = R_{i-1} - S_{i-1} + A_{i-1}

which keeps ``R_i`` inside ``[(MTP + 1) * n, (2 * MTP + 1) * n]``.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np

from ..diffcore.rng import as_generator
from ..errors import ParameterError

logger = logging.getLogger('moelab')

Sampler = Callable[[np.random.Generator, int, int], np.ndarray]

SAMPLERS = ('uniform', 'min', 'max', 'alternating', 'extremes')


def make_sampler(kind: str, mtp: int) -> Sampler:
    """Accept-length sampler returning ``U`` of shape ``[iterations, n]``."""
    top = mtp + 1
    if kind == 'uniform':
        return lambda g, iterations, n: g.integers(1, top + 1, size=(iterations, n))
    if kind == 'min':
        return lambda g, iterations, n: np.ones((iterations, n), dtype=np.int64)
    if kind == 'max':
        return lambda g, iterations, n: np.full((iterations, n), top, dtype=np.int64)
    if kind == 'alternating':
        return lambda g, iterations, n: np.where((np.arange(iterations) % 2 == 0)[:, None],
                                                 1, top) * np.ones((1, n), dtype=np.int64)
    if kind == 'extremes':
        return lambda g, iterations, n: np.where(g.random((iterations, n)) < 0.5, 1, top)
    raise ParameterError(f'unknown sampler "{kind}", expected one of {SAMPLERS}')


def kv_bounds(n: int, mtp: int) -> Tuple[int, int]:
    return (mtp + 1) * n, (2 * mtp + 1) * n


@dataclass
class KVTrace:
    """Available slots ``R_0..R_I`` and allocations ``A_0..A_{I-1}``."""
    n: int
    mtp: int
    available: np.ndarray
    allocated: np.ndarray
    violations: int

    @property
    def bounds(self) -> Tuple[int, int]:
        return kv_bounds(self.n, self.mtp)


def kv_alloc_simulate(n: int,
                      mtp: int = 1,
                      iterations: int = 100000,
                      sampler: Union[str, Sampler] = 'uniform',
                      rng=0) -> KVTrace:
    """Run the allocation recurrence and count iterations outside the bound."""
    if n < 1 or mtp < 0 or iterations < 1:
        raise ParameterError(f'need n >= 1, MTP >= 0 and iterations >= 1, got n={n}, MTP={mtp}, '
                             f'iterations={iterations}')
    generator = as_generator(rng)
    sample = make_sampler(sampler, mtp) if isinstance(sampler, str) else sampler
    accepted = np.asarray(sample(generator, iterations, n))
    if accepted.shape != (iterations, n):
        raise ParameterError(f'sampler returned shape {accepted.shape}, expected {(iterations, n)}')
    if accepted.min() < 1 or accepted.max() > mtp + 1:
        raise ParameterError(f'accept lengths must lie in [1, {mtp + 1}], '
                             f'got [{accepted.min()}, {accepted.max()}]')
    s = accepted.sum(axis=1).astype(np.int64)
    initial = (mtp + 1) * n
    allocated = np.concatenate([[initial], s[:-1]])
    available = np.empty(iterations + 1, dtype=np.int64)
    available[0] = initial
    available[1:] = initial + np.cumsum(allocated - s)
    low, high = kv_bounds(n, mtp)
    violations = int(((available < low) | (available > high)).sum())
    if violations:
        logger.warning(f'{violations} iterations left the KV bound [{low}, {high}]')
    return KVTrace(n=n, mtp=mtp, available=available, allocated=allocated, violations=violations)
