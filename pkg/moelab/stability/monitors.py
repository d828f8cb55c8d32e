"""Per-step stability metrics: hidden-state size and gradient RMS range."""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ..diffcore import Parameter, Tensor

logger = logging.getLogger('moelab')


@dataclass
class StabilityMetrics:
    hidden_norm: float
    max_abs_activation: float
    grad_rms_min: float
    grad_rms_max: float
    grad_rms_by_class: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    loss: Optional[float] = None
    loss_nonfinite: bool = False
    grad_nonfinite: bool = False
    eps_flag: bool = False


def grad_rms(named_params: Iterable[Tuple[str, Parameter]]) -> Dict[str, float]:
    """Root mean square gradient of every parameter (zero if none was accumulated)."""
    return {name: float(np.sqrt(np.mean(p.gradient ** 2))) for name, p in named_params}


def stability_report(model, hidden: Tensor, loss: Optional[float] = None,
                     eps: Optional[float] = None) -> StabilityMetrics:
    """Collect the stability metrics after a forward/backward pass.

    Parameters
    ----------
    model : Module
        Model whose parameter gradients were just computed.
    hidden : Tensor
        Final-layer hidden states before the last normalisation.
    loss : float, optional
        Loss value of the step.
    eps : float, optional
        Adam epsilon; ``eps_flag`` is raised when it reaches the smallest gradient RMS.
    """
    z = np.asarray(hidden.data if isinstance(hidden, Tensor) else hidden)
    flat = z.reshape(-1, z.shape[-1])
    named = list(model.named_parameters())
    rms = grad_rms(named)
    by_class: Dict[str, list] = {}
    for name, p in named:
        by_class.setdefault(p.param_class.value, []).append(rms[name])
    values = np.array(list(rms.values())) if rms else np.zeros(1)
    grad_nonfinite = not all(np.all(np.isfinite(p.gradient)) for _, p in named)
    metrics = StabilityMetrics(
        hidden_norm=float(np.linalg.norm(flat, axis=-1).mean()),
        max_abs_activation=float(np.abs(flat).max()) if flat.size else 0.0,
        grad_rms_min=float(values.min()),
        grad_rms_max=float(values.max()),
        grad_rms_by_class={k: (float(min(v)), float(max(v))) for k, v in by_class.items()},
        loss=loss,
        loss_nonfinite=loss is not None and not np.isfinite(loss),
        grad_nonfinite=grad_nonfinite,
        eps_flag=eps is not None and eps >= float(values.min()),
    )
    if metrics.eps_flag:
        logger.warning(f'Adam epsilon {eps} reaches the smallest gradient RMS {metrics.grad_rms_min:.3e}')
    return metrics
