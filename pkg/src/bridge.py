"""
Skeleton-aware language interface.

Skeleton tokens are projected into the decoder embedding space and placed in
the context where the prompt template holds <SkeletonFeature>. The decoder
base stays frozen; training touches only the projection, the LoRA factors
and, when the encoder is unfrozen, the skeleton side.

    LoRA:  y = W x + (alpha / r) * B dropout(A x),   B initialized to zero
"""
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from src.align import AlignmentModel, PreparedDataset
from src.decoder import TinyDecoder, TinyDecoderConfig, Vocabulary
from src.errors import CheckpointError, ParameterError, TrainingDivergedError
from src.evalkit import LabelLexicon, OutputFormat, render_output_format
from src.logs import MetricsLog
from src.numerics import DTYPE, as_tensor
from src.tokenizer import Granularity
from src.unify import MaskedTokens, MaskPolicy, skeleton_slots

FEATURE_MARKER = "<SkeletonFeature>"
RECOGNITION_TEMPLATE = "#Human: <Skeleton> <SkeletonFeature> </Skeleton> Can you tell me the emotion of this person? #Assistant:"
DESCRIPTION_TEMPLATE = (
    "#Human: <Skeleton> <SkeletonFeature> </Skeleton> The emotion of this person is [{label}], "
    "please tell me some reasons for it. #Assistant:"
)
ADAPTER_VERSION = 1
IGNORE = -100

logger = logging.getLogger(__name__)


### Prompts


class PromptKind(str, Enum):
    RECOGNITION = "recognition"
    DESCRIPTION = "description"


@dataclass(frozen=True)
class RenderedPrompt:
    kind: PromptKind
    text: str
    label: str | None = None

    @property
    def prefix(self) -> str:
        return self.text.split(FEATURE_MARKER)[0]

    @property
    def suffix(self) -> str:
        return self.text.split(FEATURE_MARKER)[1]


def assemble_prompt(kind: PromptKind | str, label: str | None = None, lexicon: LabelLexicon | None = None) -> RenderedPrompt:
    kind = PromptKind(kind)
    if kind is PromptKind.RECOGNITION:
        return RenderedPrompt(kind, RECOGNITION_TEMPLATE)
    if not label:
        raise ParameterError("a description prompt needs an emotion label")
    if lexicon is not None:
        lexicon.require(label)
    return RenderedPrompt(kind, DESCRIPTION_TEMPLATE.format(label=label), label)


### Projection


class SkeletonProjector(nn.Module):
    """1 to 3 linear layers from token width to decoder width, GELU between."""

    def __init__(self, in_dim: int, out_dim: int, depth: int = 1, seed: int = 0):
        super().__init__()
        if not 1 <= depth <= 3:
            raise ParameterError(f"projection depth must be 1, 2 or 3, got {depth}")
        self.in_dim, self.out_dim = in_dim, out_dim
        generator = torch.Generator().manual_seed(seed)
        widths = [in_dim] + [out_dim] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:], strict=True))
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x) if i == 0 else layer(F.gelu(x))
        return x


def project(token, layer: SkeletonProjector) -> torch.Tensor:
    token = as_tensor(token)
    if token.shape[-1] != layer.in_dim:
        raise ParameterError(f"token width {token.shape[-1]} does not match projection input {layer.in_dim}")
    return layer(token)


### LoRA


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 64
    alpha: float = 16.0
    dropout: float = 0.05
    targets: tuple[str, ...] = ("q", "v")
    seed: int = 0

    def __post_init__(self):
        if self.rank < 1:
            raise ParameterError(f"LoRA rank must be positive, got {self.rank}")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"LoRA dropout must lie in [0, 1), got {self.dropout}")
        if not set(self.targets) <= {"q", "k", "v", "o"}:
            raise ParameterError(f"LoRA targets must be among q, k, v, o; got {self.targets}")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


@dataclass
class LoraAdapter:
    A: torch.Tensor  # (r, d_in)
    B: torch.Tensor  # (d_out, r)
    alpha: float
    dropout: float = 0.0

    @property
    def rank(self) -> int:
        return int(self.A.shape[0])


def lora_forward(W_frozen, adapter: LoraAdapter, x, *, bias=None, training: bool = False) -> torch.Tensor:
    """W x + (alpha / r) B (A x); dropout on A x only while training."""
    W, x = as_tensor(W_frozen), as_tensor(x)
    A, B = as_tensor(adapter.A), as_tensor(adapter.B)
    if W.shape[1] != x.shape[-1] or A.shape[1] != W.shape[1] or B.shape != (W.shape[0], A.shape[0]):
        raise ParameterError(f"incompatible shapes W {tuple(W.shape)}, A {tuple(A.shape)}, B {tuple(B.shape)}, x {tuple(x.shape)}")
    low = F.dropout(x @ A.T, p=adapter.dropout, training=training)
    out = x @ W.T + (adapter.alpha / adapter.rank) * (low @ B.T)
    return out if bias is None else out + as_tensor(bias)


class LoraLinear(nn.Module):
    def __init__(self, base: nn.Linear, config: LoraConfig, generator: torch.Generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.config = config
        bound = 1.0 / math.sqrt(base.in_features)
        self.lora_A = nn.Parameter(torch.empty(config.rank, base.in_features, dtype=DTYPE).uniform_(-bound, bound, generator=generator))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, config.rank, dtype=DTYPE))

    @property
    def adapter(self) -> LoraAdapter:
        return LoraAdapter(self.lora_A, self.lora_B, self.config.alpha, self.config.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return lora_forward(self.base.weight, self.adapter, x, bias=self.base.bias, training=self.training)


def attach_lora(decoder: TinyDecoder, config: LoraConfig) -> list[LoraLinear]:
    generator = torch.Generator().manual_seed(config.seed)
    attached = []
    for attn in decoder.attention_layers():
        for name in config.targets:
            current = getattr(attn, name)
            if isinstance(current, LoraLinear):
                raise ParameterError(f"attention projection {name} already carries an adapter")
            wrapped = LoraLinear(current, config, generator)
            setattr(attn, name, wrapped)
            attached.append(wrapped)
    return attached


def detach_lora(decoder: TinyDecoder) -> None:
    for attn in decoder.attention_layers():
        for name in ("q", "k", "v", "o"):
            current = getattr(attn, name)
            if isinstance(current, LoraLinear):
                setattr(attn, name, current.base)


def lora_modules(decoder: TinyDecoder) -> list[LoraLinear]:
    return [m for m in decoder.modules() if isinstance(m, LoraLinear)]


def freeze_base(decoder: TinyDecoder) -> None:
    for name, p in decoder.named_parameters():
        p.requires_grad_("lora_" in name)


### Bridge model


@dataclass
class SkeletonFeatures:
    semantic: torch.Tensor | None  # (D_tok,)
    slots: torch.Tensor | None  # (n, C)
    keep: torch.Tensor | None  # (n,) bool

    def rows(self) -> list[list[float]]:
        """Kept token vectors as plain lists, semantic first."""
        rows = [] if self.semantic is None else [self.semantic.tolist()]
        if self.slots is not None:
            rows += [slot.tolist() for slot, k in zip(self.slots, self.keep.tolist(), strict=True) if k]
        return rows


def slot_count(granularity: Granularity, spatial_length: int, temporal_length: int, channels: int) -> int:
    n = 1 if granularity in (Granularity.SEMANTIC, Granularity.SPATIOTEMPORAL) else 0
    n += spatial_length // channels if granularity.uses_spatial else 0
    n += temporal_length // channels if granularity.uses_temporal else 0
    return n


class BridgeModel(nn.Module):
    def __init__(
        self,
        skeleton: AlignmentModel,
        decoder: TinyDecoder,
        vocab: Vocabulary,
        granularity: Granularity = Granularity.SPATIOTEMPORAL,
        mask_policy: MaskPolicy = MaskPolicy.DROP,
        projection_depth: int = 1,
        seed: int = 0,
    ):
        super().__init__()
        self.skeleton = skeleton
        self.decoder = decoder
        self.vocab = vocab
        self.granularity = Granularity(granularity)
        self.mask_policy = MaskPolicy(mask_policy)
        d_model = decoder.config.d_model
        self.semantic_proj = SkeletonProjector(skeleton.tokenizer.config.token_dim, d_model, projection_depth, seed)
        self.slot_proj = SkeletonProjector(skeleton.channels, d_model, projection_depth, seed + 1)
        needed = slot_count(self.granularity, skeleton.spatial_length, skeleton.temporal_length, skeleton.channels)
        if needed > decoder.config.skeleton_slots:
            raise ParameterError(f"granularity {self.granularity.value} needs {needed} skeleton slots, decoder reserves {decoder.config.skeleton_slots}")

    @property
    def skeleton_frozen(self) -> bool:
        return self.skeleton.encoder.config.frozen

    def projection_parameters(self) -> list[nn.Parameter]:
        params = []
        if self.granularity in (Granularity.SEMANTIC, Granularity.SPATIOTEMPORAL):
            params += list(self.semantic_proj.parameters())
        if self.granularity.uses_spatial or self.granularity.uses_temporal:
            params += list(self.slot_proj.parameters())
        return params

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = self.projection_parameters()
        params += [p for m in lora_modules(self.decoder) for p in (m.lora_A, m.lora_B)]
        if not self.skeleton_frozen:
            params += self.skeleton.skeleton_parameters()
        return params

    def features(self, frames: torch.Tensor, adjacency: torch.Tensor) -> list[SkeletonFeatures]:
        """Per-sample skeleton tokens for a same-J (B, 64, J, 3) batch."""
        frames = as_tensor(frames)
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        bundle, spatial, temporal = self.skeleton.tokens(frames, adjacency)
        C = self.skeleton.channels
        g = self.granularity
        out = []
        for b in range(frames.shape[0]):
            semantic = bundle.semantic[b] if g in (Granularity.SEMANTIC, Granularity.SPATIOTEMPORAL) else None
            parts, keeps = [], []
            for use, unified in ((g.uses_spatial, spatial), (g.uses_temporal, temporal)):
                if use:
                    slots, keep = skeleton_slots(MaskedTokens(unified.values[b], unified.mask[b], unified.valid_length), C)
                    parts.append(slots)
                    keeps.append(keep)
            slots = torch.cat(parts) if parts else None
            keep = torch.cat(keeps) if keeps else None
            out.append(SkeletonFeatures(semantic, slots, keep))
        return out

    def skeleton_embeddings(self, features: SkeletonFeatures) -> tuple[torch.Tensor, torch.Tensor]:
        embeds, keeps = [], []
        if features.semantic is not None:
            embeds.append(project(features.semantic, self.semantic_proj)[None])
            keeps.append(torch.ones(1, dtype=torch.bool))
        if features.slots is not None:
            slot_embeds = project(features.slots, self.slot_proj)
            keep = features.keep
            if self.mask_policy is MaskPolicy.ZERO:
                slot_embeds = slot_embeds * keep[:, None].to(DTYPE)
                keep = torch.ones_like(keep)
            embeds.append(slot_embeds)
            keeps.append(keep)
        return torch.cat(embeds), torch.cat(keeps)

    def build_sequence(self, prompt: RenderedPrompt, features: SkeletonFeatures, completion: str | None = None):
        """Context embeddings, attend-mask and next-token targets (completion + eos only)."""
        prefix_ids = self.vocab.encode(prompt.prefix)
        suffix_ids = self.vocab.encode(prompt.suffix)
        skel, skel_keep = self.skeleton_embeddings(features)
        completion_ids = [] if completion is None else self.vocab.encode(completion) + [self.vocab.eos_id]
        text = self.decoder.embed_tokens
        pieces = [text(prefix_ids), skel, text(suffix_ids)]
        if completion_ids:
            pieces.append(text(completion_ids))
        embeds = torch.cat(pieces)
        keep = torch.cat([torch.ones(len(prefix_ids), dtype=torch.bool), skel_keep, torch.ones(len(suffix_ids) + len(completion_ids), dtype=torch.bool)])
        prompt_length = len(prefix_ids) + skel.shape[0] + len(suffix_ids)
        targets = torch.full((embeds.shape[0],), IGNORE, dtype=torch.long)
        if completion_ids:
            targets[prompt_length - 1 : prompt_length - 1 + len(completion_ids)] = torch.as_tensor(completion_ids)
        return embeds, keep, targets


def build_bridge(
    skeleton: AlignmentModel,
    vocab: Vocabulary,
    *,
    d_model: int = 256,
    layers: int = 2,
    heads: int = 4,
    context: int = 128,
    granularity: Granularity = Granularity.SPATIOTEMPORAL,
    mask_policy: MaskPolicy = MaskPolicy.DROP,
    projection_depth: int = 1,
    seed: int = 0,
) -> BridgeModel:
    granularity = Granularity(granularity)
    slots = slot_count(granularity, skeleton.spatial_length, skeleton.temporal_length, skeleton.channels)
    config = TinyDecoderConfig(len(vocab), d_model, layers, heads, context, slots, seed)
    return BridgeModel(skeleton, TinyDecoder(config), vocab, granularity, mask_policy, projection_depth, seed)


### Exchanges


@dataclass
class Exchange:
    sample_id: str
    dataset_id: str
    label: str
    prompt: RenderedPrompt
    completion: str
    frames: torch.Tensor  # (64, J, 3)
    adjacency: torch.Tensor


def recognition_completion(label: str, fmt: OutputFormat | str, lexicon: LabelLexicon) -> str:
    return render_output_format(fmt, label, lexicon)


def build_exchanges(
    data: PreparedDataset,
    kind: PromptKind | str,
    lexicon: LabelLexicon,
    *,
    fmt: OutputFormat | str = OutputFormat.B,
    descriptions: dict[str, list[str]] | None = None,
) -> list[Exchange]:
    kind = PromptKind(kind)
    exchanges = []
    for i, (sample_id, label) in enumerate(zip(data.sample_ids, data.labels, strict=True)):
        if kind is PromptKind.RECOGNITION:
            prompt, completion = assemble_prompt(kind), recognition_completion(label, fmt, lexicon)
        else:
            texts = (descriptions or {}).get(label)
            if not texts:
                raise ParameterError(f"no reference description for label {label!r}")
            prompt, completion = assemble_prompt(kind, label.lower(), lexicon), texts[i % len(texts)]
        exchanges.append(Exchange(sample_id, data.name, label, prompt, completion, data.frames[i], data.adjacency))
    return exchanges


def language_corpus(lexicon: LabelLexicon, descriptions: dict[str, list[str]], labels: Sequence[str] | None = None) -> list[str]:
    """Every sentence the decoder should know before it is frozen."""
    labels = list(labels) if labels is not None else lexicon.labels
    corpus = [RECOGNITION_TEMPLATE]
    for label in labels:
        corpus.append(DESCRIPTION_TEMPLATE.format(label=label.lower()))
        corpus += [render_output_format(fmt, label, lexicon) for fmt in OutputFormat]
        corpus += descriptions.get(label, [])
    return corpus


def build_vocabulary(lexicon: LabelLexicon, descriptions: dict[str, list[str]]) -> Vocabulary:
    return Vocabulary.build(language_corpus(lexicon, descriptions))


### Fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 400
    batch_size: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError(f"steps must be >= 0 and batch_size >= 1, got {self.steps}, {self.batch_size}")


@dataclass
class FinetuneResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0


class FeatureCache:
    """Skeleton features per sample; cached only while the skeleton side is frozen."""

    def __init__(self, bridge: BridgeModel):
        self.bridge = bridge
        self._cache: dict[tuple[str, str], SkeletonFeatures] = {}

    def __call__(self, exchange: Exchange) -> SkeletonFeatures:
        key = (exchange.dataset_id, exchange.sample_id)
        if not self.bridge.skeleton_frozen:
            return self.bridge.features(exchange.frames, exchange.adjacency)[0]
        if key not in self._cache:
            with torch.no_grad():
                self._cache[key] = self.bridge.features(exchange.frames, exchange.adjacency)[0]
        return self._cache[key]


def exchange_loss(bridge: BridgeModel, exchanges: Sequence[Exchange], features: FeatureCache | None = None) -> torch.Tensor:
    """Next-token cross-entropy over completion tokens, conditioned on the gold prefix."""
    features = features or FeatureCache(bridge)
    sequences = [bridge.build_sequence(ex.prompt, features(ex), ex.completion) for ex in exchanges]
    width = max(s[0].shape[0] for s in sequences)
    d_model = bridge.decoder.config.d_model
    embeds = torch.zeros(len(sequences), width, d_model, dtype=DTYPE)
    keep = torch.zeros(len(sequences), width, dtype=torch.bool)
    targets = torch.full((len(sequences), width), IGNORE, dtype=torch.long)
    for i, (e, k, t) in enumerate(sequences):
        embeds[i, : e.shape[0]] = e
        keep[i, : k.shape[0]] = k
        targets[i, : t.shape[0]] = t
    logits = bridge.decoder(embeds, keep)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE)


def finetune(
    bridge: BridgeModel,
    exchanges: Sequence[Exchange],
    config: FinetuneConfig,
    *,
    metrics: MetricsLog | None = None,
    stage: str = "finetune",
) -> FinetuneResult:
    """AdamW over the projection, adapters and (if unfrozen) skeleton side."""
    if not exchanges:
        raise ParameterError(f"{stage}: no training exchanges")
    freeze_base(bridge.decoder)
    params = bridge.trainable_parameters()
    for p in params:
        p.requires_grad_(True)
    if bridge.skeleton_frozen:
        for p in bridge.skeleton.parameters():
            p.requires_grad_(False)

    started = time.monotonic()
    result = FinetuneResult()
    if config.steps == 0:
        return result
    torch.manual_seed(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    features = FeatureCache(bridge)
    bridge.decoder.train()
    try:
        for step in range(1, config.steps + 1):
            picks = torch.randperm(len(exchanges), generator=generator)[: config.batch_size].tolist()
            loss = exchange_loss(bridge, [exchanges[i] for i in picks], features)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"{stage}: loss became {float(loss)} at step {step}")
            optimizer.zero_grad()
            loss.backward()
            if config.grad_clip is not None:
                nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()
            result.losses.append(float(loss))
            if step % config.log_every == 0 or step == config.steps:
                logger.info(f"{stage} step {step}/{config.steps}: loss {float(loss):.4f}")
                if metrics is not None:
                    metrics.record(stage, step=step, lr=config.learning_rate, loss=float(loss), loss_ce=float(loss))
    finally:
        bridge.decoder.eval()
    result.steps = config.steps
    result.seconds = time.monotonic() - started
    return result


### Generation


def generate(
    bridge: BridgeModel,
    prompt: RenderedPrompt,
    features: SkeletonFeatures,
    *,
    max_tokens: int = 40,
    temperature: float = 0.0,
    seed: int | None = None,
) -> str:
    """Greedy decoding by default; temperature > 0 samples with a seeded generator."""
    generator = torch.Generator().manual_seed(seed if seed is not None else 0) if temperature > 0 else None
    was_training = bridge.decoder.training
    bridge.decoder.eval()
    out: list[int] = []
    try:
        with torch.no_grad():
            embeds, keep, _ = bridge.build_sequence(prompt, features)
            limit = bridge.decoder.config.max_positions
            for _ in range(max_tokens):
                if embeds.shape[0] >= limit:
                    break
                logits = bridge.decoder(embeds[None], keep[None])[0, -1]
                if generator is None:
                    next_id = int(logits.argmax())
                else:
                    probs = torch.softmax(logits / temperature, dim=-1)
                    next_id = int(torch.multinomial(probs, 1, generator=generator))
                if next_id == bridge.vocab.eos_id:
                    break
                out.append(next_id)
                embeds = torch.cat([embeds, bridge.decoder.embed_tokens([next_id])])
                keep = torch.cat([keep, torch.ones(1, dtype=torch.bool)])
    finally:
        bridge.decoder.train(was_training)
    return bridge.vocab.decode(out)


class DecoderBackend(Protocol):
    name: str

    async def generate(self, prompt: RenderedPrompt, features: SkeletonFeatures, *, max_tokens: int, seed: int | None = None) -> str: ...


class TinyBackend:
    name = "tiny"

    def __init__(self, bridge: BridgeModel, temperature: float = 0.0):
        self.bridge = bridge
        self.temperature = temperature

    async def generate(self, prompt: RenderedPrompt, features: SkeletonFeatures, *, max_tokens: int = 40, seed: int | None = None) -> str:
        return generate(self.bridge, prompt, features, max_tokens=max_tokens, temperature=self.temperature, seed=seed)


### Adapter checkpoints


def save_adapters(bridge: BridgeModel, path: Path, *, lora: LoraConfig | None = None, stages: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v for k, v in bridge.decoder.state_dict().items() if "lora_" in k}
    torch.save(
        {
            "version": ADAPTER_VERSION,
            "lora": None if lora is None else {**lora.__dict__, "targets": list(lora.targets)},
            "adapters": state,
            "semantic_proj": bridge.semantic_proj.state_dict(),
            "slot_proj": bridge.slot_proj.state_dict(),
            "skeleton": None if bridge.skeleton_frozen else bridge.skeleton.state_dict(),
            "granularity": bridge.granularity.value,
            "mask_policy": bridge.mask_policy.value,
            "stages": list(stages),
        },
        path,
    )
    return path


def load_adapters(bridge: BridgeModel, path: Path) -> dict:
    """Attach (if needed) and restore adapters, projections and any tuned skeleton weights."""
    try:
        blob = torch.load(Path(path), weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read adapter checkpoint {path}: {e}") from e
    if blob.get("version") != ADAPTER_VERSION:
        raise CheckpointError(f"adapter checkpoint {path} has unsupported version {blob.get('version')}")
    if blob["lora"] is not None and not lora_modules(bridge.decoder):
        lora = blob["lora"]
        attach_lora(bridge.decoder, LoraConfig(**{**lora, "targets": tuple(lora["targets"])}))
    missing = bridge.decoder.load_state_dict(blob["adapters"], strict=False)
    if missing.unexpected_keys:
        raise CheckpointError(f"adapter checkpoint {path} has unexpected tensors {missing.unexpected_keys[:5]}")
    bridge.semantic_proj.load_state_dict(blob["semantic_proj"])
    bridge.slot_proj.load_state_dict(blob["slot_proj"])
    if blob["skeleton"] is not None:
        bridge.skeleton.load_state_dict(blob["skeleton"])
    return blob
