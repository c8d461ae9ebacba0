"""
Skeleton-language alignment.

Text side: one unit vector per emotion label, read from a text-embedding file.
Skeleton side: encoder + tokenizer, a label head on the semantic token and a
shared affine map that lifts pooled spatial/temporal tokens to the text width.

Similarity softmax over a batch of N pairs, with cos the cosine similarity:

    P_s2t[i, j] = softmax_j(cos(zs_i, zt_j) / tau)
    P_t2s[i, j] = softmax_j(cos(zt_i, zs_j) / tau)

Contrastive loss against row-normalized positive targets Y:

    L_con = 1/2 * mean_i [ KL(Y_i || P_s2t[i]) + KL(Y_i || P_t2s[i]) ]
"""
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from src.encoder import (
    EncoderConfig,
    JointGraph,
    SkeletonEncoder,
    build_joint_graph,
    freeze,
    unfreeze,
)
from src.errors import CheckpointError, DatasetLoadError, ParameterError, TrainingDivergedError
from src.logs import MetricsLog
from src.numerics import (
    DTYPE,
    SgdState,
    apply_sgd_step,
    as_tensor,
    cosine_matrix,
    cross_entropy,
    kl_divergence,
    kl_divergence_from_log,
    log_softmax,
)
from src.skeldata import TARGET_FRAMES, LoadedDataset, default_skeleton_edges, resample_to_frames
from src.tokenizer import SkeletonTokenizer, TokenizerConfig
from src.unify import global_token_length, masked_mean, unify_tokens

CHECKPOINT_VERSION = 1
DEFAULT_TEMPERATURE = 0.07
TEXT_TEMPLATE = "This is a {label} person."

logger = logging.getLogger(__name__)


### Text embeddings


@dataclass
class TextEmbeddingTable:
    vectors: dict[str, torch.Tensor]
    dim: int
    provenance: str = ""

    def __post_init__(self):
        for label, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise DatasetLoadError(f"text embedding for {label!r} has shape {tuple(vec.shape)}, expected ({self.dim},)")

    @property
    def labels(self) -> list[str]:
        return list(self.vectors)

    def vector(self, label: str) -> torch.Tensor:
        if label not in self.vectors:
            raise ParameterError(f"label {label!r} has no text embedding (known: {self.labels})")
        return self.vectors[label]

    def matrix(self, labels: Sequence[str]) -> torch.Tensor:
        return torch.stack([self.vector(label) for label in labels])


def _unit(vec: np.ndarray, label: str) -> torch.Tensor:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DatasetLoadError(f"text embedding for {label!r} is the zero vector")
    return torch.as_tensor(vec / norm, dtype=DTYPE)


def load_text_embeddings(path: Path, labels: Sequence[str] | None = None) -> TextEmbeddingTable:
    """
    Read a text-embedding file: a header "label_count dim", then one line per
    label holding the label followed by `dim` reals. Vectors are L2-normalized.
    """
    path = Path(path)
    try:
        lines = [line.split() for line in path.read_text().splitlines() if line.strip()]
    except OSError as e:
        raise DatasetLoadError(f"cannot read text embeddings {path}: {e}") from e
    if not lines or len(lines[0]) != 2:
        raise DatasetLoadError(f"{path}: header must be 'label_count dim'")
    try:
        count, dim = int(lines[0][0]), int(lines[0][1])
    except ValueError as e:
        raise DatasetLoadError(f"{path}: malformed header {' '.join(lines[0])!r}") from e
    if len(lines) - 1 != count:
        raise DatasetLoadError(f"{path}: header announces {count} labels but file has {len(lines) - 1}")

    vectors: dict[str, torch.Tensor] = {}
    for fields in lines[1:]:
        label, values = fields[0], fields[1:]
        if len(values) != dim:
            raise DatasetLoadError(f"{path}: label {label!r} has {len(values)} values, expected {dim}")
        try:
            vectors[label] = _unit(np.asarray(values, dtype=np.float64), label)
        except ValueError as e:
            raise DatasetLoadError(f"{path}: label {label!r} has non-numeric values") from e

    for label in labels or []:
        if label not in vectors:
            raise DatasetLoadError(f"{path}: missing text embedding for label {label!r}")
    return TextEmbeddingTable(vectors, dim, provenance=str(path))


def write_text_embeddings(table: TextEmbeddingTable, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{len(table.vectors)} {table.dim}"]
    for label, vec in table.vectors.items():
        lines.append(" ".join([label, *(f"{v:.17g}" for v in vec.tolist())]))
    path.write_text("\n".join(lines) + "\n")
    return path


def synthesize_text_embeddings(labels: Sequence[str], dim: int = 768, seed: int = 0) -> TextEmbeddingTable:
    """Deterministic stand-in vectors, one per label sentence."""
    vectors = {}
    for label in labels:
        sentence = TEXT_TEMPLATE.format(label=label.lower())
        digest = hashlib.sha256(f"{seed}:{sentence}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vectors[label] = _unit(rng.standard_normal(dim), label)
    return TextEmbeddingTable(vectors, dim, provenance=f"synthetic:seed={seed}")


### Similarity and contrastive loss


@dataclass
class ContrastiveBatch:
    skeleton: torch.Tensor  # (N, D)
    text: torch.Tensor  # (N, D)
    labels: list[str]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.skeleton, self.text = as_tensor(self.skeleton), as_tensor(self.text)
        if self.skeleton.shape != self.text.shape or self.skeleton.dim() != 2:
            raise ParameterError(f"skeleton {tuple(self.skeleton.shape)} and text {tuple(self.text.shape)} must both be (N, D)")
        if len(self.labels) != self.skeleton.shape[0]:
            raise ParameterError(f"{len(self.labels)} labels for {self.skeleton.shape[0]} pairs")


def target_matrix(labels: Sequence[str]) -> torch.Tensor:
    """Y[i, j] = 1 / #positives(i) where labels i and j match, else 0."""
    same = torch.tensor([[a == b for b in labels] for a in labels], dtype=DTYPE)
    return same / same.sum(dim=1, keepdim=True)


def _similarity_logs(batch: ContrastiveBatch) -> tuple[torch.Tensor, torch.Tensor]:
    sims = cosine_matrix(batch.skeleton, batch.text)
    return log_softmax(sims, batch.temperature, dim=1), log_softmax(sims.T, batch.temperature, dim=1)


def similarity_distributions(batch: ContrastiveBatch) -> tuple[torch.Tensor, torch.Tensor]:
    log_s2t, log_t2s = _similarity_logs(batch)
    return log_s2t.exp(), log_t2s.exp()


def contrastive_loss(batch: ContrastiveBatch, targets: torch.Tensor | None = None) -> torch.Tensor:
    targets = target_matrix(batch.labels) if targets is None else as_tensor(targets)
    log_s2t, log_t2s = _similarity_logs(batch)
    return 0.5 * (kl_divergence_from_log(targets, log_s2t).mean() + kl_divergence_from_log(targets, log_t2s).mean())


def contrastive_loss_from_distributions(p_s2t, p_t2s, targets) -> torch.Tensor:
    """Same loss for explicitly given probability matrices."""
    return 0.5 * (kl_divergence(targets, p_s2t).mean() + kl_divergence(targets, p_t2s).mean())


def _label_indices(labels: Sequence[str], classes: Sequence[str]) -> torch.Tensor:
    index = {c: i for i, c in enumerate(classes)}
    missing = [label for label in labels if label not in index]
    if missing:
        raise ParameterError(f"labels {sorted(set(missing))} are not among the head classes {list(classes)}")
    return torch.tensor([index[label] for label in labels], dtype=torch.long)


def loss_se(
    semantic,
    logits,
    labels: Sequence[str],
    classes: Sequence[str],
    table: TextEmbeddingTable,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """Cross-entropy of the label head plus the contrastive term on semantic tokens."""
    semantic = as_tensor(semantic)
    if semantic.shape[-1] != table.dim:
        raise ParameterError(f"semantic tokens have width {semantic.shape[-1]} but text embeddings have {table.dim}")
    ce = cross_entropy(logits, _label_indices(labels, classes))
    con = contrastive_loss(ContrastiveBatch(semantic, table.matrix(labels), list(labels), temperature))
    return ce + con


def loss_st(
    spatial_pooled,
    temporal_pooled,
    logits,
    labels: Sequence[str],
    classes: Sequence[str],
    table: TextEmbeddingTable,
    temperature: float = DEFAULT_TEMPERATURE,
) -> torch.Tensor:
    """
    Cross-entropy plus the mean of the spatial and temporal contrastive terms.
    Pooled inputs are already lifted to the text width (see AlignmentModel).
    """
    text = table.matrix(labels)
    ce = cross_entropy(logits, _label_indices(labels, classes))
    con_s = contrastive_loss(ContrastiveBatch(spatial_pooled, text, list(labels), temperature))
    con_t = contrastive_loss(ContrastiveBatch(temporal_pooled, text, list(labels), temperature))
    return ce + 0.5 * (con_s + con_t)


LOSS_ALIASES = {"L_se": "ce+se", "L_st": "ce+st", "se_full": "ce+se", "st_full": "ce+st"}
LOSS_TERMS = ("ce", "se", "st")


def parse_loss_terms(spec: str) -> frozenset[str]:
    """'ce+se' -> {'ce', 'se'}; accepts the aliases L_se / L_st."""
    spec = LOSS_ALIASES.get(spec, spec)
    terms = frozenset(part.strip() for part in spec.split("+") if part.strip())
    if not terms or not terms <= set(LOSS_TERMS):
        raise ParameterError(f"loss {spec!r} must combine terms from {LOSS_TERMS} with '+'")
    return terms


### Model


def _init_linear(layer: nn.Linear, generator: torch.Generator) -> nn.Linear:
    bound = (6.0 / (layer.in_features + layer.out_features)) ** 0.5
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.zero_()
    return layer


@dataclass
class PreparedDataset:
    name: str
    frames: torch.Tensor  # (N, 64, J, 3)
    labels: list[str]
    sample_ids: list[str]
    adjacency: torch.Tensor

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def joint_count(self) -> int:
        return int(self.frames.shape[2])


def prepare_dataset(dataset: LoadedDataset, sample_ids: Sequence[str] | None = None) -> PreparedDataset:
    """Resample the selected sequences to 64 frames and stack them."""
    manifest = dataset.manifest
    by_id = dataset.by_id()
    ids = list(sample_ids) if sample_ids is not None else [s.sample_id for s in dataset.sequences]
    if not ids:
        raise ParameterError(f"dataset {manifest.name}: no samples selected")
    sequences = [resample_to_frames(by_id[i]) for i in ids]
    edges = manifest.edges if manifest.edges is not None else default_skeleton_edges(manifest.joint_count)
    graph = build_joint_graph(manifest.joint_count, edges)
    frames = torch.as_tensor(np.stack([s.frames for s in sequences]), dtype=DTYPE)
    return PreparedDataset(manifest.name, frames, [s.label for s in sequences], ids, torch.as_tensor(graph.adjacency, dtype=DTYPE))


@dataclass
class ForwardOutput:
    semantic: torch.Tensor  # (B, D_tok)
    logits: torch.Tensor  # (B, K)
    spatial_pooled: torch.Tensor  # (B, D_txt)
    temporal_pooled: torch.Tensor  # (B, D_txt)


class AlignmentModel(nn.Module):
    """Encoder + tokenizer + label head + pooled-token text lift."""

    def __init__(
        self,
        encoder_config: EncoderConfig,
        tokenizer_config: TokenizerConfig,
        classes: Sequence[str],
        joint_counts: Sequence[int],
        text_dim: int,
        skeleton_edges: dict[int, Sequence[tuple[int, int]]] | None = None,
    ):
        super().__init__()
        if tokenizer_config.channels != encoder_config.base_channels:
            raise ParameterError(
                f"tokenizer channels {tokenizer_config.channels} must equal encoder channels {encoder_config.base_channels}"
            )
        self.classes = list(classes)
        self.joint_counts = list(joint_counts)
        self.text_dim = text_dim
        given = skeleton_edges or {}
        self.skeleton_edges = {
            j: [(int(a), int(b)) for a, b in given.get(j, default_skeleton_edges(j))] for j in sorted(set(self.joint_counts))
        }
        # the stored graph only fixes the default adjacency; batches pass their own
        widest = max(self.joint_counts)
        self.encoder = SkeletonEncoder(build_joint_graph(widest, self.skeleton_edges[widest]), encoder_config)
        self.tokenizer = SkeletonTokenizer(tokenizer_config)
        generator = torch.Generator().manual_seed(encoder_config.seed + 1)
        C = encoder_config.base_channels
        self.head = _init_linear(nn.Linear(tokenizer_config.token_dim, len(self.classes), dtype=DTYPE), generator)
        self.text_lift = _init_linear(nn.Linear(C, text_dim, dtype=DTYPE), generator)
        self.spatial_length, self.temporal_length = global_token_length(self.joint_counts, C, TARGET_FRAMES)

    @property
    def channels(self) -> int:
        return self.encoder.config.base_channels

    def graph_for(self, joint_count: int) -> JointGraph:
        """Joint graph trained for this joint count; default edges for an unseen one."""
        edges = self.skeleton_edges.get(joint_count)
        if edges is None:
            logger.warning(f"no trained skeleton for {joint_count} joints; using the default edges")
            edges = default_skeleton_edges(joint_count)
        return build_joint_graph(joint_count, edges)

    def skeleton_parameters(self) -> list[nn.Parameter]:
        return list(self.encoder.parameters()) + list(self.tokenizer.parameters())

    def tokens(self, frames: torch.Tensor, adjacency: torch.Tensor):
        """Raw token bundle plus unified spatial/temporal tokens for one same-J group."""
        bundle = self.tokenizer(self.encoder(frames, adjacency))
        spatial = unify_tokens(bundle.spatial, self.spatial_length)
        temporal = unify_tokens(bundle.temporal, self.temporal_length)
        return bundle, spatial, temporal

    def forward_group(self, frames: torch.Tensor, adjacency: torch.Tensor) -> ForwardOutput:
        bundle, spatial, temporal = self.tokens(frames, adjacency)
        C = self.channels
        return ForwardOutput(
            semantic=bundle.semantic,
            logits=self.head(bundle.semantic),
            spatial_pooled=self.text_lift(masked_mean(spatial, C)),
            temporal_pooled=self.text_lift(masked_mean(temporal, C)),
        )

    def forward_mixed(self, groups: Sequence[tuple[torch.Tensor, torch.Tensor]]) -> ForwardOutput:
        outs = [self.forward_group(frames, adjacency) for frames, adjacency in groups]
        return ForwardOutput(
            semantic=torch.cat([o.semantic for o in outs]),
            logits=torch.cat([o.logits for o in outs]),
            spatial_pooled=torch.cat([o.spatial_pooled for o in outs]),
            temporal_pooled=torch.cat([o.temporal_pooled for o in outs]),
        )


### Objective


@dataclass(frozen=True)
class Objective:
    terms: frozenset[str] = frozenset({"ce", "se"})
    temperature: float = DEFAULT_TEMPERATURE

    @classmethod
    def parse(cls, spec: str, temperature: float = DEFAULT_TEMPERATURE) -> "Objective":
        return cls(parse_loss_terms(spec), temperature)

    @property
    def name(self) -> str:
        return "+".join(t for t in LOSS_TERMS if t in self.terms)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    ce: torch.Tensor | None
    con: torch.Tensor | None


def objective_terms(out: ForwardOutput, labels: Sequence[str], classes: Sequence[str], table: TextEmbeddingTable, objective: Objective) -> LossBreakdown:
    text = table.matrix(labels)
    tau = objective.temperature
    ce = cross_entropy(out.logits, _label_indices(labels, classes)) if "ce" in objective.terms else None
    con_parts = []
    if "se" in objective.terms:
        if out.semantic.shape[-1] != table.dim:
            raise ParameterError(f"semantic token width {out.semantic.shape[-1]} must equal text width {table.dim}")
        con_parts.append(contrastive_loss(ContrastiveBatch(out.semantic, text, list(labels), tau)))
    if "st" in objective.terms:
        con_s = contrastive_loss(ContrastiveBatch(out.spatial_pooled, text, list(labels), tau))
        con_t = contrastive_loss(ContrastiveBatch(out.temporal_pooled, text, list(labels), tau))
        con_parts.append(0.5 * (con_s + con_t))
    con = sum(con_parts[1:], con_parts[0]) if con_parts else None
    parts = [p for p in (ce, con) if p is not None]
    return LossBreakdown(sum(parts[1:], parts[0]), ce, con)


### Pretraining


@dataclass(frozen=True)
class PretrainSchedule:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 8
    momentum: float = 0.9
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (10, 15)
    decay_factor: float = 0.1
    grad_clip: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 2:
            raise ParameterError(f"epochs must be >= 0 and batch_size >= 2, got {self.epochs}, {self.batch_size}")

    def learning_rate_at(self, epoch: int) -> float:
        """1-based epochs; linear warmup lr/10 -> lr, then x decay_factor after each milestone."""
        lr = self.learning_rate
        if self.warmup_epochs > 0 and epoch <= self.warmup_epochs:
            if self.warmup_epochs == 1:
                return lr
            start = lr / 10
            return start + (lr - start) * (epoch - 1) / (self.warmup_epochs - 1)
        passed = sum(1 for m in self.decay_epochs if epoch > m)
        return lr * self.decay_factor**passed


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    loss: float
    loss_ce: float | None
    loss_con: float | None
    accuracy: float


@dataclass
class PretrainResult:
    model: AlignmentModel
    history: list[EpochMetrics] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


def _epoch_batches(sizes: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """Shuffled (dataset, row) batches; a trailing singleton joins the previous batch."""
    items = [(d, i) for d, n in enumerate(sizes) for i in range(n)]
    order = rng.permutation(len(items))
    items = [items[k] for k in order]
    batches = [items[k : k + batch_size] for k in range(0, len(items), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2].extend(batches.pop())
    return batches


def _groups(batch: list[tuple[int, int]], data: Sequence[PreparedDataset]):
    groups, labels = [], []
    for d, ds in enumerate(data):
        rows = [i for dd, i in batch if dd == d]
        if rows:
            groups.append((ds.frames[rows], ds.adjacency))
            labels.extend(ds.labels[i] for i in rows)
    return groups, labels


def classification_accuracy(model: AlignmentModel, data: Sequence[PreparedDataset]) -> float:
    correct, total = 0, 0
    with torch.no_grad():
        for ds in data:
            out = model.forward_group(ds.frames, ds.adjacency)
            predicted = out.logits.argmax(dim=1).tolist()
            correct += sum(model.classes[p] == label for p, label in zip(predicted, ds.labels, strict=True))
            total += len(ds)
    if total == 0:
        raise ParameterError("accuracy over an empty dataset")
    return correct / total


def save_alignment(model: AlignmentModel, path: Path, *, epoch: int, sgd: SgdState | None = None, history=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "epoch": epoch,
            "encoder_config": model.encoder.config.__dict__,
            "tokenizer_config": {**model.tokenizer.config.__dict__, "granularity": model.tokenizer.config.granularity.value},
            "classes": model.classes,
            "joint_counts": model.joint_counts,
            "text_dim": model.text_dim,
            "skeleton_edges": model.skeleton_edges,
            "state": model.state_dict(),
            "velocities": None if sgd is None else sgd.velocities,
            "history": [h.__dict__ for h in history or []],
        },
        path,
    )
    return path


def load_alignment(path: Path) -> tuple[AlignmentModel, dict]:
    try:
        blob = torch.load(Path(path), weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read alignment checkpoint {path}: {e}") from e
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"alignment checkpoint {path} has unsupported version {blob.get('version')}")
    model = AlignmentModel(
        EncoderConfig(**blob["encoder_config"]),
        TokenizerConfig(**blob["tokenizer_config"]),
        blob["classes"],
        blob["joint_counts"],
        blob["text_dim"],
        blob.get("skeleton_edges"),
    )
    model.load_state_dict(blob["state"])
    return model, blob


def pretrain(
    model: AlignmentModel,
    data: Sequence[PreparedDataset],
    table: TextEmbeddingTable,
    schedule: PretrainSchedule,
    objective: Objective = Objective(),
    *,
    metrics: MetricsLog | None = None,
    checkpoint_path: Path | None = None,
    resume: bool = False,
    stage: str = "pretrain",
) -> PretrainResult:
    """
    Momentum-SGD pretraining of the skeleton side under `objective`. The
    encoder is trained here regardless of its frozen flag and handed back
    frozen. With `resume`, training continues after the epoch stored in
    `checkpoint_path`.
    """
    if not data or sum(len(d) for d in data) < 2:
        raise ParameterError("pretraining needs at least two samples")
    table.matrix(sorted({label for d in data for label in d.labels}))

    started = time.monotonic()
    sgd = SgdState(schedule.learning_rate, schedule.momentum)
    history: list[EpochMetrics] = []
    first_epoch = 1
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        restored, blob = load_alignment(checkpoint_path)
        model.load_state_dict(restored.state_dict())
        sgd.velocities = blob["velocities"]
        history = [EpochMetrics(**h) for h in blob["history"]]
        first_epoch = blob["epoch"] + 1
        logger.info(f"{stage}: resuming after epoch {blob['epoch']}")

    model.encoder.set_config(unfreeze(model.encoder.config))
    params = [p for p in model.parameters() if p.requires_grad]
    model.train()
    try:
        for epoch in range(first_epoch, schedule.epochs + 1):
            sgd.learning_rate = schedule.learning_rate_at(epoch)
            rng = np.random.default_rng([schedule.seed, epoch])
            sums = {"loss": 0.0, "ce": 0.0, "con": 0.0}
            correct = seen = 0
            for step, batch in enumerate(_epoch_batches([len(d) for d in data], schedule.batch_size, rng)):
                groups, labels = _groups(batch, data)
                out = model.forward_mixed(groups)
                terms = objective_terms(out, labels, model.classes, table, objective)
                if not torch.isfinite(terms.total):
                    raise TrainingDivergedError(f"{stage}: loss became {float(terms.total)} at epoch {epoch} step {step}")
                for p in params:
                    p.grad = None
                terms.total.backward()
                if schedule.grad_clip is not None:
                    nn.utils.clip_grad_norm_(params, schedule.grad_clip)
                apply_sgd_step(params, sgd)

                n = len(labels)
                sums["loss"] += float(terms.total) * n
                sums["ce"] += float(terms.ce) * n if terms.ce is not None else 0.0
                sums["con"] += float(terms.con) * n if terms.con is not None else 0.0
                predicted = out.logits.detach().argmax(dim=1).tolist()
                correct += sum(model.classes[p] == label for p, label in zip(predicted, labels, strict=True))
                seen += n

            row = EpochMetrics(
                epoch=epoch,
                lr=sgd.learning_rate,
                loss=sums["loss"] / seen,
                loss_ce=sums["ce"] / seen if "ce" in objective.terms else None,
                loss_con=sums["con"] / seen if objective.terms & {"se", "st"} else None,
                accuracy=correct / seen,
            )
            history.append(row)
            logger.info(f"{stage} epoch {epoch}: lr {row.lr:.4g} loss {row.loss:.4f} acc {row.accuracy:.3f}")
            if metrics is not None:
                metrics.record(stage, epoch=epoch, lr=row.lr, loss=row.loss, loss_ce=row.loss_ce, loss_con=row.loss_con, accuracy=row.accuracy)
            if checkpoint_path is not None:
                save_alignment(model, checkpoint_path, epoch=epoch, sgd=sgd, history=history)
    finally:
        model.encoder.set_config(freeze(model.encoder.config))
        model.eval()

    return PretrainResult(model, history, checkpoint_path, time.monotonic() - started)
