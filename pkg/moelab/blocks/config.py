"""Architecture description of the MoE language model."""
from pydantic import BaseModel, ConfigDict, Field

from ..config import PYDANTIC_EXTRA
from ..errors import ConfigurationError
from ..routing.router import validate_router_dims


class ModelConfig(BaseModel):
    """Dimensions and switches of :class:`~moelab.blocks.model.MoELanguageModel`.

    ``n_ffn_experts`` counts the fine-grained experts after splitting by
    ``segmentation``; ``expert_inter`` is the width of one of them.
    """
    model_config = ConfigDict(validate_assignment=True, extra=PYDANTIC_EXTRA)

    vocab_size: int = Field(default=259, gt=0)  # 256 byte values and three reserved ids
    d_model: int = Field(default=128, gt=0)
    n_layers: int = Field(default=4, gt=0)
    n_heads: int = Field(default=4, gt=0)
    head_dim: int = Field(default=32, gt=0)
    rope_dim: int = Field(default=16, gt=0)
    d_q: int = Field(default=32, gt=0)
    d_kv: int = Field(default=16, gt=0)
    dense_inter: int = Field(default=256, gt=0)
    n_ffn_experts: int = Field(default=16, gt=0)
    n_zero_experts: int = Field(default=8, ge=0)
    top_k: int = Field(default=6, gt=0)
    k_expected: int = Field(default=4, gt=0)
    segmentation: int = Field(default=2, ge=1)
    expert_inter: int = Field(default=64, gt=0)
    variance_alignment: bool = True
    latent_norm: bool = True
    gamma_compensation: bool = True
    gamma_scope: str = 'ffn'
    renormalize_gates: bool = False
    shortcut: bool = True
    rope_base: float = Field(default=1e6, gt=0)
    use_mtp: bool = True
    mtp_inter: int = Field(default=128, gt=0)
    norm_eps: float = Field(default=1e-6, gt=0)
    chunks: int = Field(default=1, ge=1)

    def check(self):
        """Raise :class:`ConfigurationError` for structurally inconsistent dimensions."""
        validate_router_dims(self.n_ffn_experts, self.n_zero_experts, self.top_k, self.k_expected)
        if self.n_ffn_experts % self.segmentation:
            raise ConfigurationError(f'segmentation m={self.segmentation} must divide N={self.n_ffn_experts}')
        if self.rope_dim % 2:
            raise ConfigurationError(f'rope_dim must be even, got {self.rope_dim}')
        if self.gamma_scope not in ('ffn', 'all'):
            raise ConfigurationError(f'gamma_scope must be "ffn" or "all", got "{self.gamma_scope}"')
        return self
