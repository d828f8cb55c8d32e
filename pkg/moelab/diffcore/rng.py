"""Seeded random number streams and parameter initialisation."""
import logging
import math
from typing import Sequence, Union

import numpy as np

from .tensor import Tensor, default_dtype
from ..errors import ParameterError

logger = logging.getLogger('moelab')

#: variance of a standard normal truncated to [-2, 2]
TRUNCATED_NORMAL_VARIANCE = 1.0 - 4.0 * math.exp(-2.0) / math.sqrt(2.0 * math.pi) / math.erf(2.0 / math.sqrt(2.0))

DISTRIBUTIONS = ('uniform', 'truncated-normal')


class RngState:
    """A counter-based (Philox) random stream identified by a 64-bit seed.

    Independent sub-streams are derived with :meth:`spawn`. The same seed and
    keys produce the same numbers on every platform.
    """
    algorithm = 'philox'

    def __init__(self, seed: int, *keys: int):
        if not 0 <= int(seed) < 2 ** 64:
            raise ParameterError(f'seed must be a 64-bit unsigned integer, got {seed}')
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.keys)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def __repr__(self):
        return f'RngState(seed={self.seed}, keys={self.keys}, algorithm={self.algorithm})'

    def spawn(self, *keys: int) -> 'RngState':
        """Return an independent stream, a pure function of seed and keys."""
        return RngState(self.seed, *self.keys, *keys)


def as_generator(rng: Union[RngState, np.random.Generator, int]) -> np.random.Generator:
    if isinstance(rng, RngState):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return RngState(rng).generator


def _truncated_standard_normal(generator: np.random.Generator, n: int) -> np.ndarray:
    samples = generator.standard_normal(n)
    outside = np.abs(samples) > 2.0
    while outside.any():
        samples[outside] = generator.standard_normal(int(outside.sum()))
        outside = np.abs(samples) > 2.0
    return samples


def seeded_init(shape: Sequence[int],
                distribution: str,
                variance: float,
                rng: Union[RngState, np.random.Generator, int],
                dtype=None) -> Tensor:
    """Draw a tensor with zero mean and the requested variance.

    Parameters
    ----------
    shape : sequence of int
        Shape of the result.
    distribution : str
        ``'uniform'`` or ``'truncated-normal'`` (cut at two standard
        deviations and rescaled so that the variance is exact).
    variance : float
        Target variance, must be non-negative.
    rng : RngState or numpy.random.Generator or int
        Source of randomness.
    """
    if variance < 0:
        raise ParameterError(f'variance must be non-negative, got {variance}')
    if distribution not in DISTRIBUTIONS:
        raise ParameterError(f'unknown distribution "{distribution}", expected one of {DISTRIBUTIONS}')
    shape = tuple(int(s) for s in shape)
    dtype = dtype or default_dtype()
    n = int(np.prod(shape)) if shape else 1
    if variance == 0:
        return Tensor(np.zeros(shape, dtype=dtype))
    generator = as_generator(rng)
    if distribution == 'uniform':
        bound = math.sqrt(3.0 * variance)
        values = generator.uniform(-bound, bound, n)
    else:
        values = _truncated_standard_normal(generator, n) * math.sqrt(variance / TRUNCATED_NORMAL_VARIANCE)
    logger.debug(f'seeded_init {distribution} shape={shape} variance={variance}')
    return Tensor(values.reshape(shape).astype(dtype))
