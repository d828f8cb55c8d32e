"""Multi-head latent attention with scale-corrected low-rank compressions.

Queries and keys/values are first compressed to latent vectors ``c_Q``
(width ``d_q``) and ``c_KV`` (width ``d_kv``). Each latent vector is
RMS-normalised and multiplied by ``sqrt(d_model/d)`` so that the up-projected
components have the same variance as the rotary key projected straight from
the hidden state. A key/value cache stores only ``c_KV`` and the rotary key.

Conventions: row vectors, ``x @ W`` with ``W`` of shape ``[in, out]``.
"""
import logging
import math
from typing import Dict, Optional, Tuple

import numpy as np

from .init import init_parameter
from .norm import RMSNorm
from ..diffcore import Module, Tensor, concat, rope_apply, softmax
from ..diffcore.functional import MASK_VALUE
from ..diffcore.tensor import lift, no_grad
from ..errors import DimensionError, ParameterError, StateError

logger = logging.getLogger('moelab')


def mla_scale_factors(d_model: int, d_q: int, d_kv: int) -> Tuple[float, float]:
    """Return ``(alpha_q, alpha_kv) = (sqrt(d_model/d_q), sqrt(d_model/d_kv))``."""
    if min(d_model, d_q, d_kv) <= 0:
        raise ParameterError(f'dimensions must be positive, got d_model={d_model}, d_q={d_q}, d_kv={d_kv}')
    return math.sqrt(d_model / d_q), math.sqrt(d_model / d_kv)


class MLAParams(Module):
    """Weights and dimensions of one latent attention block.

    Parameters
    ----------
    d_model, d_q, d_kv : int
        Model width and the query / key-value compression widths.
    n_heads, head_dim, rope_dim : int
        Head count, per-head content dimension and rotary dimension.
    variance_alignment : bool
        Use ``alpha_q, alpha_kv`` from :func:`mla_scale_factors`; both are 1 otherwise.
    latent_norm : bool
        RMS-normalise the latent vectors before scaling.
    rope_base : float
        Rotary base frequency.
    init_variance : float
        Variance of all projection weights.
    rng : RngState, optional
        Random stream; zero weights when omitted.
    """

    def __init__(self, d_model: int, d_q: int, d_kv: int, n_heads: int, head_dim: int, rope_dim: int,
                 variance_alignment: bool = True, latent_norm: bool = True, rope_base: float = 1e6,
                 init_variance: float = 4e-4, rng=None, norm_eps: float = 1e-6):
        if rope_dim % 2:
            raise DimensionError(f'rope_dim must be even, got {rope_dim}')
        if variance_alignment:
            self.alpha_q, self.alpha_kv = mla_scale_factors(d_model, d_q, d_kv)
        else:
            mla_scale_factors(d_model, d_q, d_kv)
            self.alpha_q, self.alpha_kv = 1.0, 1.0
        self.d_model, self.d_q, self.d_kv = d_model, d_q, d_kv
        self.n_heads, self.head_dim, self.rope_dim = n_heads, head_dim, rope_dim
        self.rope_base = rope_base
        self.variance_alignment = variance_alignment
        hd, hr = n_heads * head_dim, n_heads * rope_dim
        self.w_dq = init_parameter((d_model, d_q), init_variance, rng)
        self.q_norm = RMSNorm(d_q, norm_eps) if latent_norm else None
        self.w_uq = init_parameter((d_q, hd), init_variance, rng)
        self.w_qr = init_parameter((d_q, hr), init_variance, rng)
        self.w_dkv = init_parameter((d_model, d_kv), init_variance, rng)
        self.kv_norm = RMSNorm(d_kv, norm_eps) if latent_norm else None
        self.w_uk = init_parameter((d_kv, hd), init_variance, rng)
        self.w_uv = init_parameter((d_kv, hd), init_variance, rng)
        self.w_kr = init_parameter((d_model, rope_dim), init_variance, rng)
        self.w_o = init_parameter((hd, d_model), init_variance, rng)

    def __call__(self, h, kv_cache: Optional['MLAKVCache'] = None, start_pos: Optional[int] = None) -> Tensor:
        return mla_forward(h, self, kv_cache=kv_cache, start_pos=start_pos)


class MLAKVCache:
    """Compressed key/value cache: latent ``c_KV`` and rotated ``k_R`` per position."""

    def __init__(self):
        self.c_kv: Optional[np.ndarray] = None
        self.k_rope: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return 0 if self.c_kv is None else self.c_kv.shape[1]

    def check(self):
        if (self.c_kv is None) != (self.k_rope is None):
            raise StateError('KV cache holds only one of latent and rotary entries')
        if self.c_kv is not None and self.c_kv.shape[:2] != self.k_rope.shape[:2]:
            raise StateError(f'KV cache latent entries {self.c_kv.shape[:2]} '
                             f'do not match rotary entries {self.k_rope.shape[:2]}')

    def append(self, c_kv: np.ndarray, k_rope: np.ndarray):
        if self.c_kv is None:
            self.c_kv, self.k_rope = c_kv.copy(), k_rope.copy()
        else:
            if c_kv.shape[0] != self.c_kv.shape[0]:
                raise StateError(f'batch size changed from {self.c_kv.shape[0]} to {c_kv.shape[0]}')
            self.c_kv = np.concatenate([self.c_kv, c_kv], axis=1)
            self.k_rope = np.concatenate([self.k_rope, k_rope], axis=1)

    def elements_per_token(self) -> int:
        if self.c_kv is None:
            return 0
        return self.c_kv.shape[-1] + self.k_rope.shape[-1]


def kv_cache_footprint(params: MLAParams) -> Dict[str, float]:
    """Cached scalars per token and layer for latent attention and for plain multi-head attention."""
    mla = params.d_kv + params.rope_dim
    mha = 2 * params.n_heads * params.head_dim
    return {'mla': mla, 'mha': mha, 'ratio': mla / mha}


def _latent(h: Tensor, weight, norm: Optional[RMSNorm], alpha: float) -> Tensor:
    c = h @ weight
    if norm is not None:
        c = norm(c)
    return c * alpha


def _split_heads(x: Tensor, batch: int, length: int, n_heads: int, dim: int) -> Tensor:
    return x.reshape(batch, length, n_heads, dim).transpose(0, 2, 1, 3)


def _queries(h: Tensor, params: MLAParams, positions: np.ndarray) -> Tuple[Tensor, Tensor]:
    batch, length, _ = h.shape
    c_q = _latent(h, params.w_dq, params.q_norm, params.alpha_q)
    q_c = _split_heads(c_q @ params.w_uq, batch, length, params.n_heads, params.head_dim)
    q_r = _split_heads(c_q @ params.w_qr, batch, length, params.n_heads, params.rope_dim)
    return q_c, rope_apply(q_r, positions, params.rope_base)


def _key_sources(h: Tensor, params: MLAParams, positions: np.ndarray) -> Tuple[Tensor, Tensor]:
    c_kv = _latent(h, params.w_dkv, params.kv_norm, params.alpha_kv)
    k_r = rope_apply(h @ params.w_kr, positions, params.rope_base)
    return c_kv, k_r


def mla_forward(h, params: MLAParams, kv_cache: Optional[MLAKVCache] = None,
                start_pos: Optional[int] = None) -> Tensor:
    """Causal latent attention over ``h`` (``[T, d_model]`` or ``[B, T, d_model]``).

    With a ``kv_cache`` the new tokens attend to all cached positions plus
    themselves and their latent entries are appended to the cache.
    ``start_pos``, when given, must equal the number of cached positions.
    """
    h = lift(h)
    squeeze = h.ndim == 2
    if squeeze:
        h = h.reshape(1, *h.shape)
    if h.ndim != 3 or h.shape[-1] != params.d_model:
        raise DimensionError(f'expected [B, T, {params.d_model}] input, got {h.shape}')
    batch, length, _ = h.shape
    offset = 0
    if kv_cache is not None:
        kv_cache.check()
        offset = kv_cache.length
        if start_pos is not None and start_pos != offset:
            raise StateError(f'cache holds {offset} positions but start_pos is {start_pos}')
    elif start_pos is not None:
        offset = start_pos
    positions = offset + np.arange(length)

    q_c, q_r = _queries(h, params, positions)
    c_kv, k_r = _key_sources(h, params, positions)
    if kv_cache is not None:
        kv_cache.append(c_kv.data, k_r.data)
        c_kv, k_r = Tensor(kv_cache.c_kv), Tensor(kv_cache.k_rope)
    n_keys = c_kv.shape[1]

    k_c = _split_heads(c_kv @ params.w_uk, batch, n_keys, params.n_heads, params.head_dim)
    v = _split_heads(c_kv @ params.w_uv, batch, n_keys, params.n_heads, params.head_dim)
    k_r = k_r.reshape(batch, 1, n_keys, params.rope_dim).broadcast_to((batch, params.n_heads, n_keys, params.rope_dim))
    q = concat([q_c, q_r], axis=-1)
    k = concat([k_c, k_r], axis=-1)

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(params.head_dim + params.rope_dim))
    key_positions = np.arange(n_keys) + (offset if kv_cache is None else 0)
    mask = np.where(key_positions[None, :] <= positions[:, None], 0.0, MASK_VALUE)
    attn = softmax(scores + mask, axis=-1)
    o = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, length, params.n_heads * params.head_dim)
    out = o @ params.w_o
    return out.reshape(length, params.d_model) if squeeze else out


def mla_component_variances(params: MLAParams, h, positions: Optional[np.ndarray] = None) -> Dict[str, float]:
    """Variances of the query/key components ``q_C, q_R, k_C, k_R`` for inputs ``h``."""
    with no_grad():
        h = lift(h)
        if h.ndim == 2:
            h = h.reshape(1, *h.shape)
        if positions is None:
            positions = np.arange(h.shape[1])
        q_c, q_r = _queries(h, params, positions)
        c_kv, k_r = _key_sources(h, params, positions)
        k_c = c_kv @ params.w_uk
    return {'q_C': float(np.var(q_c.data)),
            'q_R': float(np.var(q_r.data)),
            'k_C': float(np.var(k_c.data)),
            'k_R': float(np.var(k_r.data))}
