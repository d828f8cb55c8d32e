"""Finite-difference checks of every differentiable loss on small seeded instances."""
import logging
from typing import Dict, Sequence

import numpy as np

from ..blocks.mtp import MTPHead, mtp_loss
from ..blocks.norm import RMSNorm
from ..diffcore import Parameter, ParamClass, RngState, Tensor, cross_entropy, grad_check, softmax
from ..routing.balance import LBLossConfig, lb_loss
from ..routing.router import select_experts
from ..stability.zloss import hidden_z_loss

logger = logging.getLogger('moelab')

GRAD_TOLERANCE = 1e-4
_VOCAB = 11
_D = 8


def _lm(rng: RngState) -> float:
    g = rng.generator
    hidden = Tensor(g.standard_normal((2, 5, _D)), requires_grad=True)
    norm = RMSNorm(_D)
    unembedding = Parameter(0.3 * g.standard_normal((_D, _VOCAB)), ParamClass.UNEMBEDDING)
    targets = g.integers(0, _VOCAB, (2, 5))
    return grad_check(lambda: cross_entropy(norm(hidden) @ unembedding, targets), [hidden, unembedding, norm.weight])


def _lb(rng: RngState) -> float:
    g = rng.generator
    logits = Tensor(g.standard_normal((12, 6)), requires_grad=True)
    cfg = LBLossConfig(alpha=0.5, n_groups=2)
    decision = select_experts(softmax(logits).data, np.zeros(6), top_k=3, n_ffn=4, k_expected=2)
    return grad_check(lambda: lb_loss(softmax(logits), decision, cfg), [logits])


def _z(rng: RngState) -> float:
    z = Tensor(rng.generator.standard_normal((6, _D)), requires_grad=True)
    return grad_check(lambda: hidden_z_loss(z, 1.0), [z])


def _mtp(rng: RngState) -> float:
    g = rng.generator
    head = MTPHead(_D, 2 * _D, init_variance=0.1, rng=rng.spawn(1))
    embedding = Parameter(0.3 * g.standard_normal((_VOCAB, _D)), ParamClass.EMBEDDING)
    unembedding = Parameter(0.3 * g.standard_normal((_D, _VOCAB)), ParamClass.UNEMBEDDING)
    hidden = Tensor(g.standard_normal((2, 4, _D)), requires_grad=True)
    window = g.integers(0, _VOCAB, (2, 5))
    return grad_check(lambda: mtp_loss(hidden, window, head, embedding, unembedding),
                      [hidden, head.w_proj, head.ffn.w_up, embedding])


CHECKS = {'lm': _lm, 'lb': _lb, 'z': _z, 'mtp': _mtp}


def gradient_suite(seed: int, instances: int = 3, losses: Sequence[str] = tuple(CHECKS)) -> Dict[str, float]:
    """Largest relative gradient error per loss over ``instances`` seeded instances."""
    errors = {}
    for name in losses:
        errors[name] = max(CHECKS[name](RngState(seed, i, list(CHECKS).index(name))) for i in range(instances))
        logger.debug(f'gradient check {name}: max relative error {errors[name]:.3e}')
    return errors
