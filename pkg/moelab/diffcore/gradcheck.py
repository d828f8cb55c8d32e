"""Finite-difference check of reverse-mode gradients."""
import logging
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, no_grad
from .._cfg import get_config
from ..errors import EvaluationError, ParameterError

logger = logging.getLogger('moelab')


def _evaluate(f: Callable[[], Tensor]) -> Tensor:
    value = f()
    if value.size != 1:
        raise ParameterError(f'grad_check needs a scalar function, got shape {value.shape}')
    if not value.is_finite():
        raise EvaluationError(f'function value is not finite: {value.data}')
    return value


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: Optional[float] = None) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    Parameters
    ----------
    f : callable
        Builds and returns a scalar Tensor from the current values of ``params``.
    params : sequence of Tensor
        Leaves to check; perturbed in place and restored afterwards.
    step : float, optional
        Finite-difference step ``h``, defaults to ``get_config('fd_step')``.

    Returns
    -------
    float
        Maximum over ``params`` of ``||g_rev - g_fd|| / max(||g_rev||, ||g_fd||)``.
        Zero when both gradients vanish.
    """
    step = get_config('fd_step') if step is None else step
    if step <= 0:
        raise ParameterError(f'step must be positive, got {step}')
    for p in params:
        p.zero_grad()
    _evaluate(f).backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, grad in zip(params, analytic):
        p.data = np.ascontiguousarray(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            with no_grad():
                flat[i] = original + step
                upper = _evaluate(f).item()
                flat[i] = original - step
                lower = _evaluate(f).item()
            flat[i] = original
            numeric.reshape(-1)[i] = (upper - lower) / (2.0 * step)
        scale = max(float(np.linalg.norm(grad)), float(np.linalg.norm(numeric)))
        if scale == 0.0:
            continue
        error = float(np.linalg.norm(grad - numeric)) / scale
        logger.debug(f'grad_check parameter {p.shape}: relative error {error:.3e}')
        worst = max(worst, error)
    return worst
