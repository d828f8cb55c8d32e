"""Speculative decoding: expected accept length and the per-token cost ratio.

Each of the ``gamma`` draft tokens is accepted independently with
probability ``alpha`` until the first rejection; the target model always
contributes one token. The expected number of emitted tokens per step is
``sum(alpha**j for j in 0..gamma)``.
"""
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from ..diffcore.rng import as_generator
from ..errors import ParameterError

logger = logging.getLogger('moelab')

AcceptLengthModel = Callable[[int, float], float]
VerifyCost = Union[float, Callable[[int], float]]


def _check(gamma: int, alpha: float):
    if int(gamma) != gamma or gamma < 1:
        raise ParameterError(f'gamma must be an integer >= 1, got {gamma}')
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f'acceptance rate must lie in [0, 1], got {alpha}')


def expected_accept_length(gamma: int, alpha: float) -> float:
    """``Omega(gamma, alpha) = sum_{j=0}^{gamma} alpha**j``.

    >>> expected_accept_length(1, 0.8)
    1.8
    """
    _check(gamma, alpha)
    return float(sum(alpha ** j for j in range(int(gamma) + 1)))


class AcceptSimulation(NamedTuple):
    mean: float
    stderr: float
    trials: int


def simulate_accept_lengths(gamma: int, alpha: float, trials: int, rng=0) -> AcceptSimulation:
    """Monte Carlo estimate of the accept length with its standard error."""
    _check(gamma, alpha)
    if trials < 2:
        raise ParameterError(f'need at least two trials, got {trials}')
    generator = as_generator(rng)
    accepted = generator.random((trials, int(gamma))) < alpha
    lengths = 1 + np.cumprod(accepted, axis=1).sum(axis=1)
    return AcceptSimulation(mean=float(lengths.mean()),
                            stderr=float(lengths.std(ddof=1) / math.sqrt(trials)),
                            trials=trials)


@dataclass
class SpecDecParams:
    """Inputs of :func:`specdec_cost_ratio`.

    Attributes
    ----------
    gamma : int
        Draft tokens per step.
    alpha : float
        Per-token acceptance rate.
    draft_ratio : float
        Draft latency per token relative to one target forward, ``T_D / T_T``.
    verify_ratio : float or callable
        Verification latency relative to one target forward, ``T_V(gamma) / T_T``;
        a callable receives ``gamma``.
    accept_length : callable, optional
        Replacement for :func:`expected_accept_length`.
    """
    gamma: int = 1
    alpha: float = 0.8
    draft_ratio: float = 0.0
    verify_ratio: VerifyCost = 1.0
    accept_length: Optional[AcceptLengthModel] = None

    def __post_init__(self):
        _check(self.gamma, self.alpha)
        if self.draft_ratio < 0:
            raise ParameterError(f'draft latency ratio must be non-negative, got {self.draft_ratio}')
        if not callable(self.verify_ratio) and self.verify_ratio < 0:
            raise ParameterError(f'verification latency ratio must be non-negative, got {self.verify_ratio}')

    def omega(self) -> float:
        model = self.accept_length or expected_accept_length
        return model(self.gamma, self.alpha)

    def verification(self) -> float:
        return self.verify_ratio(self.gamma) if callable(self.verify_ratio) else float(self.verify_ratio)


def specdec_cost_ratio(p: SpecDecParams) -> float:
    """Expected latency per emitted token relative to plain decoding.

    ``(gamma * T_D/T_T + T_V(gamma)/T_T) / Omega``; below one means drafting pays off.
    """
    omega = p.omega()
    if omega < 1:
        raise ParameterError(f'accept length must be >= 1, got {omega}')
    return (p.gamma * p.draft_ratio + p.verification()) / omega
