"""
TinyDecoder: a small pre-LayerNorm causal transformer over a word-level
vocabulary. It takes input embeddings directly so skeleton slots can sit in
the context next to ordinary word embeddings.
"""
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from src.errors import CheckpointError, ParameterError, TrainingDivergedError
from src.numerics import DTYPE

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
SPECIALS = (PAD, UNK, EOS)
TOKEN_PATTERN = re.compile(r"<\/?\w+>|\w+|[^\w\s]")
NO_SPACE_BEFORE = set(".,!?;:)]")
NO_SPACE_AFTER = set("([#")
CHECKPOINT_VERSION = 1

logger = logging.getLogger(__name__)


def split_words(text: str) -> list[str]:
    return TOKEN_PATTERN.findall(text)


def join_words(words: Sequence[str]) -> str:
    out = ""
    for word in words:
        if out and word not in NO_SPACE_BEFORE and out[-1] not in NO_SPACE_AFTER:
            out += " "
        out += word
    return out


class Vocabulary:
    def __init__(self, words: Iterable[str]):
        self.words: list[str] = list(SPECIALS)
        self.index_of: dict[str, int] = {w: i for i, w in enumerate(SPECIALS)}
        for word in words:
            if word not in self.index_of:
                self.index_of[word] = len(self.words)
                self.words.append(word)

    @classmethod
    def build(cls, corpus: Iterable[str]) -> "Vocabulary":
        return cls(word for text in corpus for word in split_words(text))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    def encode(self, text: str) -> list[int]:
        return [self.index_of.get(word, self.unk_id) for word in split_words(text)]

    def decode(self, ids: Sequence[int]) -> str:
        words = []
        for i in ids:
            if i == self.eos_id:
                break
            if i != self.pad_id:
                words.append(self.words[i])
        return join_words(words)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.words, indent=0))

    @classmethod
    def load(cls, path: Path) -> "Vocabulary":
        words = json.loads(Path(path).read_text())
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            raise CheckpointError(f"vocabulary {path} does not start with {SPECIALS}")
        return cls(words[len(SPECIALS) :])


@dataclass(frozen=True)
class TinyDecoderConfig:
    vocab_size: int
    d_model: int = 256
    layers: int = 2
    heads: int = 4
    context: int = 128
    skeleton_slots: int = 96
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ParameterError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.vocab_size < len(SPECIALS) or self.layers < 1:
            raise ParameterError(f"bad decoder shape: vocab {self.vocab_size}, layers {self.layers}")

    @property
    def max_positions(self) -> int:
        return self.context + self.skeleton_slots


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.o = nn.Linear(d_model, d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        B, S, D = x.shape
        H, dh = self.heads, D // self.heads

        def split(t):
            return t.view(B, S, H, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        causal = torch.ones(S, S, dtype=torch.bool).tril()
        allowed = causal[None, None] & keep[:, None, None, :]
        # a query always sees itself so no row is fully masked
        allowed = allowed | torch.eye(S, dtype=torch.bool)[None, None]
        scores = scores.masked_fill(~allowed, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(B, S, D))


class DecoderBlock(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.attn = CausalSelfAttention(d_model, heads)
        self.ln2 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.fc1 = nn.Linear(d_model, 4 * d_model, dtype=DTYPE)
        self.fc2 = nn.Linear(4 * d_model, d_model, dtype=DTYPE)

    def forward(self, x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), keep)
        return x + self.fc2(F.gelu(self.fc1(self.ln2(x))))


class TinyDecoder(nn.Module):
    def __init__(self, config: TinyDecoderConfig):
        super().__init__()
        self.config = config
        self.embed = nn.Embedding(config.vocab_size, config.d_model, dtype=DTYPE)
        self.positions = nn.Embedding(config.max_positions, config.d_model, dtype=DTYPE)
        self.blocks = nn.ModuleList(DecoderBlock(config.d_model, config.heads) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(config.d_model, dtype=DTYPE)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, dtype=DTYPE)
        self._init_weights()

    def _init_weights(self) -> None:
        generator = torch.Generator().manual_seed(self.config.seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Linear):
                    module.weight.normal_(0.0, 0.02, generator=generator)
                    module.bias.zero_()
                elif isinstance(module, nn.Embedding):
                    module.weight.normal_(0.0, 0.02, generator=generator)

    def embed_tokens(self, ids) -> torch.Tensor:
        return self.embed(torch.as_tensor(ids, dtype=torch.long))

    def forward(self, inputs_embeds: torch.Tensor, keep: torch.Tensor | None = None) -> torch.Tensor:
        """(B, S, d) embeddings and a (B, S) attend-mask -> (B, S, V) logits."""
        B, S, _ = inputs_embeds.shape
        if S > self.config.max_positions:
            raise ParameterError(f"sequence of {S} positions exceeds the decoder context {self.config.max_positions}")
        if keep is None:
            keep = torch.ones(B, S, dtype=torch.bool)
        x = inputs_embeds + self.positions(torch.arange(S))[None]
        for block in self.blocks:
            x = block(x, keep)
        return self.lm_head(self.ln_f(x))

    def attention_layers(self) -> list[CausalSelfAttention]:
        return [block.attn for block in self.blocks]


def language_model_loss(decoder: TinyDecoder, ids: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Next-token cross-entropy over right-padded (B, S) id batches."""
    logits = decoder(decoder.embed_tokens(ids), keep)
    targets = ids[:, 1:].masked_fill(~keep[:, 1:], -100)
    return F.cross_entropy(logits[:, :-1].reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=-100)


def _pad_batch(sequences: Sequence[list[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    keep = torch.zeros(len(sequences), width, dtype=torch.bool)
    for i, seq in enumerate(sequences):
        ids[i, : len(seq)] = torch.as_tensor(seq)
        keep[i, : len(seq)] = True
    return ids, keep


def pretrain_language_model(
    decoder: TinyDecoder,
    vocab: Vocabulary,
    corpus: Sequence[str],
    *,
    steps: int = 300,
    batch_size: int = 16,
    learning_rate: float = 3e-3,
    seed: int = 0,
) -> list[float]:
    """Plain next-token training of every decoder weight on the text corpus."""
    if not corpus:
        raise ParameterError("language-model corpus is empty")
    sequences = [vocab.encode(text) + [vocab.eos_id] for text in corpus]
    generator = torch.Generator().manual_seed(seed)
    optimizer = torch.optim.AdamW(decoder.parameters(), lr=learning_rate, weight_decay=0.0)
    decoder.train()
    losses = []
    for step in range(steps):
        picks = torch.randint(len(sequences), (min(batch_size, len(sequences)),), generator=generator).tolist()
        ids, keep = _pad_batch([sequences[i] for i in picks], vocab.pad_id)
        loss = language_model_loss(decoder, ids, keep)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"language-model pretraining diverged at step {step}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
        if step % 50 == 0:
            logger.debug(f"lm step {step}: loss {losses[-1]:.4f}")
    decoder.eval()
    logger.info(f"language model pretrained for {steps} steps, final loss {losses[-1] if losses else float('nan'):.4f}")
    return losses


def save_decoder(decoder: TinyDecoder, vocab: Vocabulary, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"version": CHECKPOINT_VERSION, "config": decoder.config.__dict__, "vocab": vocab.words, "state": decoder.state_dict()}, path)
    return path


def load_decoder(path: Path) -> tuple[TinyDecoder, Vocabulary]:
    try:
        blob = torch.load(Path(path), weights_only=False)
    except (OSError, RuntimeError) as e:
        raise CheckpointError(f"cannot read decoder checkpoint {path}: {e}") from e
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"decoder checkpoint {path} has unsupported version {blob.get('version')}")
    decoder = TinyDecoder(TinyDecoderConfig(**blob["config"]))
    decoder.load_state_dict(blob["state"])
    decoder.eval()
    return decoder, Vocabulary(blob["vocab"][len(SPECIALS) :])
