"""
Graph-convolutional skeleton encoder.

Each layer mixes channels with a learned matrix, propagates over the
normalized joint adjacency and adds a depthwise temporal convolution:

    H <- relu(A_norm . (H W + b) + tconv(H W + b))
"""
import logging
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from src.errors import CheckpointError, ParameterError, PreconditionError, TopologyError
from src.numerics import DTYPE, as_tensor
from src.skeldata import TARGET_FRAMES

CHECKPOINT_VERSION = 1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JointGraph:
    joint_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray  # row-normalized (A + I)


def build_joint_graph(joint_count: int, edges) -> JointGraph:
    """A_norm = D^-1 (A + I) with A the symmetric edge matrix."""
    if joint_count < 1:
        raise TopologyError(f"joint count must be positive, got {joint_count}")
    edges = tuple((int(a), int(b)) for a, b in edges)
    A = np.eye(joint_count)
    for a, b in edges:
        if not (0 <= a < joint_count and 0 <= b < joint_count):
            raise TopologyError(f"edge ({a}, {b}) references a joint outside [0, {joint_count})")
        A[a, b] = A[b, a] = 1.0

    seen, frontier = {0}, deque([0])
    while frontier:
        node = frontier.popleft()
        for neighbour in np.flatnonzero(A[node]):
            if int(neighbour) not in seen:
                seen.add(int(neighbour))
                frontier.append(int(neighbour))
    if len(seen) != joint_count:
        missing = sorted(set(range(joint_count)) - seen)
        raise TopologyError(f"joint graph is disconnected; unreachable joints {missing[:10]}")

    return JointGraph(joint_count, edges, A / A.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class EncoderConfig:
    base_channels: int = 64
    layer_count: int = 3
    temporal_kernel: int = 3
    frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.base_channels < 1:
            raise ParameterError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.layer_count < 1:
            raise ParameterError(f"layer_count must be >= 1, got {self.layer_count}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ParameterError(f"temporal_kernel must be a positive odd width, got {self.temporal_kernel}")


def freeze(config: EncoderConfig) -> EncoderConfig:
    return replace(config, frozen=True)


def unfreeze(config: EncoderConfig) -> EncoderConfig:
    return replace(config, frozen=False)


def _glorot_(tensor: torch.Tensor, fan_in: int, fan_out: int, generator: torch.Generator) -> None:
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)


class GraphLayer(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, generator: torch.Generator):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_channels, dtype=DTYPE))
        # depthwise: one kernel per channel, (C, 1, k) as conv1d expects with groups=C
        self.temporal = nn.Parameter(torch.empty(out_channels, 1, kernel, dtype=DTYPE))
        _glorot_(self.weight, in_channels, out_channels, generator)
        _glorot_(self.temporal, kernel, kernel, generator)

    def forward(self, h: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        # h: (B, T, J, C_in)
        mixed = h @ self.weight + self.bias
        spatial = torch.einsum("jk,btkc->btjc", adjacency, mixed)
        B, T, J, C = mixed.shape
        series = mixed.permute(0, 2, 3, 1).reshape(B * J, C, T)
        temporal = F.conv1d(series, self.temporal, padding=self.temporal.shape[-1] // 2, groups=C)
        temporal = temporal.reshape(B, J, C, T).permute(0, 3, 1, 2)
        return torch.relu(spatial + temporal)


class SkeletonEncoder(nn.Module):
    """Maps (B, 64, J, 3) skeleton batches to (B, 64, J, C) feature maps."""

    def __init__(self, graph: JointGraph, config: EncoderConfig):
        super().__init__()
        self.graph = graph
        self.config = config
        generator = torch.Generator().manual_seed(config.seed)
        widths = [3] + [config.base_channels] * config.layer_count
        self.layers = nn.ModuleList(
            GraphLayer(c_in, c_out, config.temporal_kernel, generator) for c_in, c_out in zip(widths[:-1], widths[1:], strict=True)
        )
        self.register_buffer("adjacency", torch.as_tensor(graph.adjacency, dtype=DTYPE))
        self.apply_freeze()

    def apply_freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad_(not self.config.frozen)

    def set_config(self, config: EncoderConfig) -> None:
        self.config = config
        self.apply_freeze()

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [] if self.config.frozen else list(self.parameters())

    def forward(self, x: torch.Tensor, adjacency: torch.Tensor | None = None) -> torch.Tensor:
        x = as_tensor(x)
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != TARGET_FRAMES:
            raise PreconditionError(f"encoder expects {TARGET_FRAMES} frames, got {x.shape[1]}")
        adjacency = self.adjacency if adjacency is None else as_tensor(adjacency)
        if x.shape[2] != adjacency.shape[0]:
            raise PreconditionError(f"sequence has {x.shape[2]} joints but graph has {adjacency.shape[0]}")
        h = x
        for layer in self.layers:
            h = layer(h, adjacency)
        return h.squeeze(0) if squeeze else h


def encode(seq64, graph: JointGraph, encoder: SkeletonEncoder) -> torch.Tensor:
    """FeatureMap (64, J, C) of one resampled sequence under the given graph."""
    frames = seq64.frames if hasattr(seq64, "frames") else seq64
    return encoder(as_tensor(frames), torch.as_tensor(graph.adjacency, dtype=DTYPE))


### Checkpoints


def save_encoder(encoder: SkeletonEncoder, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": encoder.config.__dict__,
            "joint_count": encoder.graph.joint_count,
            "edges": list(encoder.graph.edges),
            "state": encoder.state_dict(),
        },
        path,
    )


def load_encoder(path: Path) -> SkeletonEncoder:
    try:
        blob = torch.load(Path(path), weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read encoder checkpoint {path}: {e}") from e
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"encoder checkpoint {path} has unsupported version {blob.get('version')}")
    graph = build_joint_graph(blob["joint_count"], blob["edges"])
    encoder = SkeletonEncoder(graph, EncoderConfig(**blob["config"]))
    encoder.load_state_dict(blob["state"])
    return encoder
