"""
Multi-granularity skeleton tokenizer.

From an encoder feature map F of shape (T, J, C) (or a batch (B, T, J, C)):

    semantic  = FC(mean over T and J)          length D_tok
    spatial   = flatten(mean over T @ W_s^T)    length J*C, joint-major
    temporal  = flatten(mean over J @ W_t^T)    length T*C, frame-major
"""
import logging
from dataclasses import dataclass
from enum import Enum

import torch
from torch import nn

from src.errors import ParameterError
from src.numerics import DTYPE, as_tensor

logger = logging.getLogger(__name__)


class Granularity(str, Enum):
    SEMANTIC = "semantic"
    SPATIAL = "spatial"
    TEMPORAL = "temporal"
    SPATIOTEMPORAL = "spatiotemporal"

    @property
    def uses_spatial(self) -> bool:
        return self in (Granularity.SPATIAL, Granularity.SPATIOTEMPORAL)

    @property
    def uses_temporal(self) -> bool:
        return self in (Granularity.TEMPORAL, Granularity.SPATIOTEMPORAL)


@dataclass
class TokenBundle:
    semantic: torch.Tensor  # (..., D_tok)
    spatial: torch.Tensor  # (..., J*C)
    temporal: torch.Tensor  # (..., T*C)
    frames: int
    joints: int
    channels: int


def _check_feature_map(feature_map: torch.Tensor) -> torch.Tensor:
    feature_map = as_tensor(feature_map)
    if feature_map.dim() not in (3, 4):
        raise ParameterError(f"feature map must be (T, J, C) or (B, T, J, C), got {tuple(feature_map.shape)}")
    return feature_map


def _check_square(weight: torch.Tensor, channels: int, what: str) -> None:
    if tuple(weight.shape) != (channels, channels):
        raise ParameterError(f"{what} must be ({channels}, {channels}), got {tuple(weight.shape)}")


def semantic_token(feature_map, fc_weight, fc_bias=None) -> torch.Tensor:
    """Spatio-temporal mean pooling followed by an affine map C -> D_tok."""
    feature_map = _check_feature_map(feature_map)
    fc_weight = as_tensor(fc_weight)
    if fc_weight.dim() != 2 or fc_weight.shape[1] != feature_map.shape[-1]:
        raise ParameterError(f"fc weight {tuple(fc_weight.shape)} does not accept {feature_map.shape[-1]} channels")
    pooled = feature_map.mean(dim=(-3, -2))
    out = pooled @ fc_weight.T
    return out if fc_bias is None else out + as_tensor(fc_bias)


def spatial_tokens(feature_map, conv_weight) -> torch.Tensor:
    feature_map = _check_feature_map(feature_map)
    conv_weight = as_tensor(conv_weight)
    _check_square(conv_weight, feature_map.shape[-1], "spatial 1x1 conv weight")
    pooled = feature_map.mean(dim=-3)  # (..., J, C)
    return (pooled @ conv_weight.T).flatten(start_dim=-2)


def temporal_tokens(feature_map, conv_weight) -> torch.Tensor:
    feature_map = _check_feature_map(feature_map)
    conv_weight = as_tensor(conv_weight)
    _check_square(conv_weight, feature_map.shape[-1], "temporal 1x1 conv weight")
    pooled = feature_map.mean(dim=-2)  # (..., T, C)
    return (pooled @ conv_weight.T).flatten(start_dim=-2)


@dataclass(frozen=True)
class TokenizerConfig:
    channels: int = 64
    token_dim: int = 768
    granularity: Granularity = Granularity.SPATIOTEMPORAL
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.channels < 1 or self.token_dim < 1:
            raise ParameterError(f"channels and token_dim must be positive, got {self.channels}, {self.token_dim}")


class SkeletonTokenizer(nn.Module):
    def __init__(self, config: TokenizerConfig):
        super().__init__()
        self.config = config
        C, D = config.channels, config.token_dim
        generator = torch.Generator().manual_seed(config.seed)
        bound_fc = (6.0 / (C + D)) ** 0.5
        bound_conv = (6.0 / (2 * C)) ** 0.5
        self.fc_weight = nn.Parameter(torch.empty(D, C, dtype=DTYPE).uniform_(-bound_fc, bound_fc, generator=generator))
        self.fc_bias = nn.Parameter(torch.zeros(D, dtype=DTYPE))
        self.spatial_weight = nn.Parameter(torch.empty(C, C, dtype=DTYPE).uniform_(-bound_conv, bound_conv, generator=generator))
        self.temporal_weight = nn.Parameter(torch.empty(C, C, dtype=DTYPE).uniform_(-bound_conv, bound_conv, generator=generator))

    def forward(self, feature_map: torch.Tensor) -> TokenBundle:
        feature_map = _check_feature_map(feature_map)
        T, J, C = feature_map.shape[-3:]
        return TokenBundle(
            semantic=semantic_token(feature_map, self.fc_weight, self.fc_bias),
            spatial=spatial_tokens(feature_map, self.spatial_weight),
            temporal=temporal_tokens(feature_map, self.temporal_weight),
            frames=T,
            joints=J,
            channels=C,
        )
