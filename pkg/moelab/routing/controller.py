"""Closed-loop simulation of the expert-bias controller.

The simulation replaces the model by a stationary logit distribution, so the
controller's convergence can be checked without training anything.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .router import RouterState, select_experts
from ..diffcore.rng import as_generator
from ..diffcore.tensor import no_grad
from ..diffcore.functional import softmax

logger = logging.getLogger('moelab')

LogitSampler = Callable[[np.random.Generator, int], np.ndarray]


class GaussianLogits:
    """Stationary router logits: Gaussian noise around fixed per-expert means.

    FFN experts are shifted by ``ffn_offset`` so that, without bias
    correction, tokens activate more FFN experts than targeted.
    """

    def __init__(self, n_ffn: int, n_zero: int, rng, ffn_offset: float = 0.5, spread: float = 0.3,
                 scale: float = 1.0):
        generator = as_generator(rng)
        self.means = generator.normal(0.0, spread, n_ffn + n_zero)
        self.means[:n_ffn] += ffn_offset
        self.scale = scale

    def __call__(self, generator: np.random.Generator, n_tokens: int) -> np.ndarray:
        return self.means + self.scale * generator.standard_normal((n_tokens, self.means.size))


@dataclass
class ControllerTrace:
    """Per-step statistics of activated FFN experts per token."""
    mean_ffn: np.ndarray
    std_ffn: np.ndarray
    running_mean: np.ndarray
    bias: np.ndarray
    window: int

    def relative_deviation(self, k_expected: float, last: int) -> float:
        """Largest ``|running mean - K_e| / K_e`` over the final ``last`` steps."""
        return float(np.max(np.abs(self.running_mean[-last:] - k_expected)) / k_expected)

    def converged(self, k_expected: float, last: int = 1000, tolerance: float = 0.01) -> bool:
        return self.relative_deviation(k_expected, last) < tolerance


def running_mean(values: np.ndarray, window: int) -> np.ndarray:
    """Mean over the trailing ``window`` entries (fewer at the start)."""
    csum = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    start = np.maximum(idx - window, 0)
    return (csum[idx] - csum[start]) / (idx - start)


def simulate_controller(state: RouterState,
                        steps: int,
                        tokens_per_batch: int,
                        rng,
                        logit_sampler: Optional[LogitSampler] = None,
                        window: int = 100) -> ControllerTrace:
    """Run the bias controller against sampled router logits.

    Each step routes ``tokens_per_batch`` tokens with the current bias, records
    the FFN activation statistics and closes the batch, so the bias moves
    every ``state.update_every`` steps as in live routing.
    """
    generator = as_generator(rng)
    if logit_sampler is None:
        logit_sampler = GaussianLogits(state.n_ffn, state.n_zero, generator)
    means = np.zeros(steps)
    stds = np.zeros(steps)
    with no_grad():
        for step in range(steps):
            probs = softmax(logit_sampler(generator, tokens_per_batch), axis=-1)
            decision = select_experts(probs, state.bias, state.top_k, state.n_ffn, state.k_expected,
                                      renormalize=state.renormalize_gates)
            counts = decision.ffn_counts
            means[step] = counts.mean()
            stds[step] = counts.std()
            state.record(decision)
            state.end_batch()
    trace = ControllerTrace(mean_ffn=means,
                            std_ffn=stds,
                            running_mean=running_mean(means, window),
                            bias=state.bias.copy(),
                            window=window)
    logger.debug(f'controller simulation: final running mean {trace.running_mean[-1]:.4f} '
                 f'(target {state.k_expected}), final std {stds[-1]:.3f}')
    return trace
