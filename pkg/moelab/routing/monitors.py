"""Router health monitors: router-weight similarity and the gradient-norm ratio."""
import logging
from typing import Callable, NamedTuple, Optional, Union

import numpy as np

from .router import RouterState
from .._cfg import get_config
from ..diffcore import Tensor
from ..errors import ConfigurationError, UndefinedRatioError

logger = logging.getLogger('moelab')


class SimilarityResult(NamedTuple):
    value: float
    excluded: int


def router_similarity(source: Union[RouterState, np.ndarray]) -> SimilarityResult:
    """Mean cosine similarity over all unordered pairs of expert weight vectors.

    Zero-norm vectors are left out; their number is returned as ``excluded``.
    """
    vectors = source.expert_vectors() if isinstance(source, RouterState) else np.asarray(source, dtype=float)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise ConfigurationError(f'router similarity needs at least two expert vectors, got {vectors.shape}')
    norms = np.linalg.norm(vectors, axis=1)
    keep = norms > 0
    excluded = int((~keep).sum())
    if excluded:
        logger.warning(f'router_similarity: excluded {excluded} zero-norm expert vectors')
    unit = vectors[keep] / norms[keep, None]
    if unit.shape[0] < 2:
        return SimilarityResult(0.0, excluded)
    cosine = unit @ unit.T
    upper = np.triu_indices(unit.shape[0], k=1)
    return SimilarityResult(float(cosine[upper].mean()), excluded)


def grad_norm_ratio_from_grads(lm_grad: np.ndarray, lb_grad: np.ndarray, alpha: float) -> float:
    """``||alpha * lb_grad|| / ||lm_grad||``."""
    lm_norm = float(np.linalg.norm(lm_grad))
    if lm_norm == 0.0:
        raise UndefinedRatioError('gradient of the LM loss with respect to the mean probabilities is zero')
    return float(np.linalg.norm(alpha * np.asarray(lb_grad))) / lm_norm


def grad_norm_ratio(p_mean,
                    lm_loss: Callable[[Tensor], Tensor],
                    lb_loss: Callable[[Tensor], Tensor],
                    alpha: float) -> float:
    """Gradient-norm ratio ``R_g`` at the batch-averaged expert probabilities ``p_mean``.

    ``lm_loss`` and ``lb_loss`` map a probability vector to a scalar; ``lb_loss``
    is the balance loss without the factor ``alpha``.
    """
    grads = []
    for loss_fn in (lm_loss, lb_loss):
        leaf = Tensor(np.array(p_mean, dtype=float), requires_grad=True)
        loss_fn(leaf).backward()
        grads.append(np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad)
    return grad_norm_ratio_from_grads(grads[0], grads[1], alpha)


class RgReading(NamedTuple):
    value: float
    ema: float
    flagged: bool


class RgTracker:
    """Per-batch ``R_g`` with an exponential moving average and a threshold flag."""

    def __init__(self, threshold: Optional[float] = None, decay: Optional[float] = None):
        self.threshold = get_config('rg_threshold') if threshold is None else threshold
        self.decay = get_config('rg_ema_decay') if decay is None else decay
        self.ema: Optional[float] = None

    def update(self, value: float) -> RgReading:
        self.ema = value if self.ema is None else self.decay * self.ema + (1.0 - self.decay) * value
        flagged = value >= self.threshold
        if flagged:
            logger.debug(f'R_g={value:.4f} reached the threshold {self.threshold}')
        return RgReading(value, self.ema, flagged)
