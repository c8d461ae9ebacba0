"""
Experiment configuration: TOML sections mapped onto frozen dataclasses.

Unknown sections or keys are rejected with the dotted key in the message.
`experiment.seed` has no default and must be given.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import tomli

from src.align import parse_loss_terms
from src.errors import ConfigError, EmotokError
from src.evalkit import OutputFormat
from src.tokenizer import Granularity
from src.unify import MaskPolicy

logger = logging.getLogger(__name__)

ORDERS = {"D->R": "D->R", "R->D": "R->D", "D→R": "D->R", "R→D": "R->D", "DR": "D->R", "RD": "R->D"}
STRATEGIES = ("joint", "separate")
BACKENDS = ("tiny", "remote")
DECODER_MODES = ("lora", "frozen")


@dataclass(frozen=True)
class ExperimentSection:
    seed: int
    name: str = "desk"
    out_dir: str = "runs"
    granularity: str = "spatiotemporal"
    strategy: str = "joint"
    order: str = "D->R"
    loss: str = "ce+se"
    backend: str = "tiny"
    output_format: str = "B"
    paper_scale: bool = False


@dataclass(frozen=True)
class DataSection:
    manifests: tuple[str, ...] = ()
    profiles: tuple[str, ...] = ("tiny",)
    samples_per_label: int | None = None
    train_fraction: float = 0.8
    text_embeddings: str | None = None
    lexicon: str | None = None
    descriptions: str | None = None


@dataclass(frozen=True)
class EncoderSection:
    base_channels: int = 64
    layer_count: int = 3
    temporal_kernel: int = 3
    frozen: bool = True


@dataclass(frozen=True)
class TokenizerSection:
    token_dim: int = 768


@dataclass(frozen=True)
class UnifySection:
    mask_policy: str = "drop"


@dataclass(frozen=True)
class AlignSection:
    temperature: float = 0.07
    text_dim: int = 768


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 8
    momentum: float = 0.9
    warmup_epochs: int = 5
    decay_epochs: tuple[int, ...] = (10, 15)
    decay_factor: float = 0.1
    grad_clip: float | None = 1.0


@dataclass(frozen=True)
class FinetuneSection:
    description_steps: int = 400
    recognition_steps: int = 400
    description_batch: int = 16
    recognition_batch: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    log_every: int = 50
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    lora_targets: tuple[str, ...] = ("q", "v")
    projection_depth: int = 1
    decoder_mode: str = "lora"


@dataclass(frozen=True)
class DecoderSection:
    d_model: int = 256
    layers: int = 2
    heads: int = 4
    context: int = 128
    lm_steps: int = 300
    lm_batch: int = 16
    lm_learning_rate: float = 3e-3
    max_tokens: int = 40
    temperature: float = 0.0


@dataclass(frozen=True)
class RemoteSection:
    endpoint: str = "http://127.0.0.1:8765/generate"
    timeout: float = 10.0
    retries: int = 2
    backoff: float = 0.5
    max_connections: int = 4


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "encoder": EncoderSection,
    "tokenizer": TokenizerSection,
    "unify": UnifySection,
    "align": AlignSection,
    "pretrain": PretrainSection,
    "finetune": FinetuneSection,
    "decoder": DecoderSection,
    "remote": RemoteSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    unify: UnifySection = field(default_factory=UnifySection)
    align: AlignSection = field(default_factory=AlignSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    remote: RemoteSection = field(default_factory=RemoteSection)

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict[str, dict[str, Any]]) -> "ExperimentConfig":
        raw = self.to_dict()
        for section, values in overrides.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            raw[section] = {**raw[section], **values}
        return config_from_dict(raw)


def _section(name: str, raw: dict) -> Any:
    cls = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
    values = {}
    for key, value in raw.items():
        if isinstance(value, list):
            value = tuple(value)
        values[key] = value
    if name == "experiment" and "seed" not in values:
        raise ConfigError("experiment.seed is required")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{name}]: {e}") from e


def config_from_dict(raw: dict) -> ExperimentConfig:
    for name in raw:
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
    if "experiment" not in raw:
        raise ConfigError("missing [experiment] section (experiment.seed is required)")
    config = ExperimentConfig(**{name: _section(name, raw[name]) for name in raw})
    return normalize(config)


def parse_value(text: str) -> Any:
    """TOML literal if it parses, otherwise the raw string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_assignments(assignments: list[str]) -> dict[str, dict[str, Any]]:
    """['pretrain.epochs=5', ...] -> {'pretrain': {'epochs': 5}}."""
    overrides: dict[str, dict[str, Any]] = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        overrides.setdefault(section, {})[name] = parse_value(value.strip())
    return overrides


def load_config(path: Path | None, assignments: list[str] | None = None, flags: dict[str, dict[str, Any]] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomli.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"config {path} is not valid TOML: {e}") from e
    for source in (parse_assignments(assignments or []), flags or {}):
        for section, values in source.items():
            raw.setdefault(section, {}).update(values)
    config = config_from_dict(raw)
    if config.experiment.paper_scale:
        config = apply_paper_scale(config)
    logger.debug(f"loaded config {config.experiment.name} (seed {config.seed})")
    return config


def normalize(config: ExperimentConfig) -> ExperimentConfig:
    """Check enumerated fields and canonicalize their spelling."""
    e = config.experiment
    order = ORDERS.get(e.order)
    if order is None:
        raise ConfigError(f"experiment.order must be D->R or R->D, got {e.order!r}")
    if e.strategy not in STRATEGIES:
        raise ConfigError(f"experiment.strategy must be one of {STRATEGIES}, got {e.strategy!r}")
    if e.backend not in BACKENDS:
        raise ConfigError(f"experiment.backend must be one of {BACKENDS}, got {e.backend!r}")
    if config.finetune.decoder_mode not in DECODER_MODES:
        raise ConfigError(f"finetune.decoder_mode must be one of {DECODER_MODES}, got {config.finetune.decoder_mode!r}")
    try:
        Granularity(e.granularity)
        OutputFormat(e.output_format)
        MaskPolicy(config.unify.mask_policy)
        parse_loss_terms(e.loss)
    except (ValueError, EmotokError) as err:
        raise ConfigError(f"invalid experiment setting: {err}") from err
    if not isinstance(e.seed, int):
        raise ConfigError(f"experiment.seed must be an integer, got {e.seed!r}")
    return replace(config, experiment=replace(e, order=order))


def validate_paths(config: ExperimentConfig, base: Path | None = None) -> None:
    """Every file the config references must exist."""
    base = Path(base) if base is not None else Path.cwd()
    d = config.data
    referenced = [("data.manifests", m) for m in d.manifests]
    referenced += [(f"data.{k}", getattr(d, k)) for k in ("text_embeddings", "lexicon", "descriptions") if getattr(d, k)]
    for key, value in referenced:
        path = Path(value) if Path(value).is_absolute() else base / value
        if not path.exists():
            raise ConfigError(f"{key}: file {value} does not exist")


def apply_paper_scale(config: ExperimentConfig) -> ExperimentConfig:
    """Swap in the full-scale schedule and model constants."""
    return replace(
        config,
        experiment=replace(config.experiment, paper_scale=True),
        encoder=replace(config.encoder, base_channels=64),
        tokenizer=replace(config.tokenizer, token_dim=768),
        align=replace(config.align, text_dim=768),
        pretrain=replace(
            config.pretrain,
            epochs=200,
            learning_rate=0.1,
            batch_size=64,
            warmup_epochs=5,
            decay_epochs=(100, 150, 175),
            decay_factor=0.1,
        ),
        finetune=replace(
            config.finetune,
            description_steps=10_000,
            recognition_steps=800_000,
            description_batch=16,
            recognition_batch=64,
            learning_rate=1e-5,
            lora_rank=64,
            lora_alpha=16.0,
            lora_dropout=0.05,
        ),
        decoder=replace(config.decoder, d_model=4096),
    )


def load_snapshot(run_dir: Path) -> ExperimentConfig:
    path = Path(run_dir) / "config.json"
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config snapshot {path}: {e}") from e
    return config_from_dict(raw)
