"""
Unified skeleton tokens: pad per-dataset token vectors to one global length L
and zero the padded region with a retention mask, z' = z * M.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import torch

from src.errors import ParameterError, TokenOverflowError
from src.numerics import DTYPE, as_tensor
from src.skeldata import TARGET_FRAMES, DatasetManifest

logger = logging.getLogger(__name__)


class MaskPolicy(str, Enum):
    DROP = "drop"  # padded slots are excluded from decoder attention
    ZERO = "zero"  # padded slots are attended to as zero vectors


@dataclass
class MaskedTokens:
    values: torch.Tensor  # (..., L)
    mask: torch.Tensor  # (..., L), entries in {0, 1}
    valid_length: int

    @property
    def length(self) -> int:
        return int(self.values.shape[-1])

    def restrict(self) -> torch.Tensor:
        return self.values[..., : self.valid_length]


def global_token_length(manifests: Iterable[DatasetManifest | int], channels: int, frames: int = TARGET_FRAMES) -> tuple[int, int]:
    """(L_spatial, L_temporal) = (max J * C, T * C)."""
    joint_counts = [m if isinstance(m, int) else m.joint_count for m in manifests]
    if not joint_counts:
        raise ParameterError("global_token_length needs at least one manifest")
    return max(joint_counts) * channels, frames * channels


def unify_tokens(raw, length: int) -> MaskedTokens:
    """Zero-pad the last axis of `raw` to `length` and apply the retention mask."""
    raw = as_tensor(raw)
    valid = int(raw.shape[-1])
    if valid > length:
        raise TokenOverflowError(f"token vector of length {valid} exceeds unified length {length}")
    mask = torch.zeros(length, dtype=DTYPE)
    mask[:valid] = 1.0
    padded = torch.nn.functional.pad(raw, (0, length - valid))
    mask = mask.expand_as(padded) if padded.dim() > 1 else mask
    return MaskedTokens(padded * mask, mask, valid)


def unify_batch(raw_batch, length: int) -> MaskedTokens:
    """Row-wise unify_tokens over a (B, n) batch sharing one valid length."""
    raw_batch = as_tensor(raw_batch)
    if raw_batch.dim() != 2:
        raise ParameterError(f"unify_batch expects a (B, n) tensor, got {tuple(raw_batch.shape)}")
    return unify_tokens(raw_batch, length)


def masked_mean(tokens: MaskedTokens, channels: int) -> torch.Tensor:
    """Average the valid region viewed as (valid_length / C, C) positions."""
    if channels < 1 or tokens.valid_length % channels != 0:
        raise ParameterError(f"valid length {tokens.valid_length} is not divisible by C={channels}")
    if tokens.valid_length == 0:
        raise ParameterError("masked_mean over an empty valid region")
    valid = tokens.restrict()
    positions = valid.reshape(*valid.shape[:-1], tokens.valid_length // channels, channels)
    return positions.mean(dim=-2)


def skeleton_slots(tokens: MaskedTokens, channels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """
    View unified tokens as decoder slots: values (..., L/C, C) and a boolean
    keep mask (..., L/C) that is False on padded slots.
    """
    if tokens.length % channels != 0 or tokens.valid_length % channels != 0:
        raise ParameterError(f"token length {tokens.length} / valid {tokens.valid_length} not divisible by C={channels}")
    slots = tokens.values.reshape(*tokens.values.shape[:-1], tokens.length // channels, channels)
    keep = tokens.mask.reshape(*tokens.mask.shape[:-1], tokens.length // channels, channels)[..., 0] > 0
    return slots, keep
