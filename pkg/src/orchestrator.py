"""
Experiment pipeline behind the emotok verbs: data, pretraining, fine-tuning
in the configured task order, evaluation and one-shot description.

Checkpoints inside a run directory are named per training group: one group
"joint" under the joint strategy, one group per dataset under the separate
strategy.
"""
import asyncio
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from rich.console import Console
from rich.table import Table

from src.align import (
    AlignmentModel,
    EpochMetrics,
    Objective,
    PreparedDataset,
    PretrainSchedule,
    TextEmbeddingTable,
    classification_accuracy,
    load_alignment,
    load_text_embeddings,
    prepare_dataset,
    pretrain,
    save_alignment,
    synthesize_text_embeddings,
)
from src.bridge import (
    BridgeModel,
    DecoderBackend,
    Exchange,
    FeatureCache,
    FinetuneConfig,
    LoraConfig,
    PromptKind,
    RenderedPrompt,
    SkeletonFeatures,
    TinyBackend,
    assemble_prompt,
    attach_lora,
    build_bridge,
    build_exchanges,
    build_vocabulary,
    finetune,
    generate,
    language_corpus,
    load_adapters,
    save_adapters,
)
from src.config import ExperimentConfig
from src.data import DESCRIPTIONS_PATH, LEXICON_PATH
from src.decoder import load_decoder, pretrain_language_model, save_decoder
from src.encoder import EncoderConfig, freeze, unfreeze
from src.errors import CheckpointError, ConfigError, ParameterError, PreconditionError, TransportError
from src.evalkit import ERROR, EvaluationReport, GenerationRecord, extract_label, load_descriptions, load_lexicon, text_scores
from src.numerics import DTYPE
from src.remote import RemoteBackend, RemoteConfig
from src.runs import RunDirectory
from src.skeldata import (
    LoadedDataset,
    SplitSpec,
    default_skeleton_edges,
    get_profile,
    load_dataset,
    read_sample,
    resample_to_frames,
    split_train_test,
    synthesize_dataset,
)
from src.tokenizer import TokenizerConfig

console = Console()
logger = logging.getLogger(__name__)

JOINT = "joint"
STAGE_ORDERS = {
    "D->R": (PromptKind.DESCRIPTION, PromptKind.RECOGNITION),
    "R->D": (PromptKind.RECOGNITION, PromptKind.DESCRIPTION),
}


@dataclass
class DataSplit:
    datasets: list[LoadedDataset]
    train: dict[str, list[str]]
    test: dict[str, list[str]]

    def prepared(self, members: Sequence[LoadedDataset], which: str = "train") -> list[PreparedDataset]:
        ids = self.train if which == "train" else self.test
        return [prepare_dataset(ds, ids[ds.manifest.name]) for ds in members if ids[ds.manifest.name]]


@dataclass
class GenerationJob:
    sample_id: str
    dataset_id: str
    label: str
    prompt: RenderedPrompt
    features: SkeletonFeatures


def downstream_config(upstream: ExperimentConfig, current: ExperimentConfig) -> ExperimentConfig:
    """The caller's config with the data and skeleton shape the upstream run trained on."""
    return current.with_overrides(
        {
            "experiment": {"strategy": upstream.experiment.strategy},
            "data": asdict(upstream.data),
            "encoder": {
                "base_channels": upstream.encoder.base_channels,
                "layer_count": upstream.encoder.layer_count,
                "temporal_kernel": upstream.encoder.temporal_kernel,
            },
            "tokenizer": asdict(upstream.tokenizer),
            "align": asdict(upstream.align),
        }
    )


def inference_config(upstream: ExperimentConfig, current: ExperimentConfig) -> ExperimentConfig:
    """The trained run's settings with the caller's backend and decoding options."""
    return upstream.with_overrides(
        {
            "experiment": {"backend": current.experiment.backend},
            "remote": asdict(current.remote),
            "decoder": {"max_tokens": current.decoder.max_tokens, "temperature": current.decoder.temperature},
        }
    )


class Pipeline:
    def __init__(self, config: ExperimentConfig, base_dir: Path | None = None):
        self.config = config
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.lexicon = load_lexicon(self._path(config.data.lexicon))
        self.descriptions = load_descriptions(self._path(config.data.descriptions))
        torch.manual_seed(config.seed)

    def _path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    ### Data

    def load_datasets(self) -> list[LoadedDataset]:
        """Manifests when any are configured, otherwise the synthetic profiles."""
        d = self.config.data
        if d.manifests:
            datasets = [load_dataset(self._path(m)) for m in d.manifests]
        else:
            overrides: dict = {"seed": self.config.seed}
            if d.samples_per_label is not None:
                overrides["samples_per_label"] = d.samples_per_label
            datasets = [synthesize_dataset(get_profile(name, **overrides)) for name in d.profiles]
        if not datasets:
            raise ConfigError("no data configured: set data.manifests or data.profiles")
        names = [ds.manifest.name for ds in datasets]
        if len(set(names)) != len(names):
            raise ConfigError(f"dataset names must be unique, got {names}")
        for ds in datasets:
            for label in ds.manifest.labels:
                if self.lexicon.canonical(label) != label:
                    raise ConfigError(f"dataset {ds.manifest.name}: label {label!r} is not a canonical lexicon label")
        return datasets

    def input_files(self) -> list[Path]:
        d = self.config.data
        paths = [self._path(d.lexicon) or LEXICON_PATH, self._path(d.descriptions) or DESCRIPTIONS_PATH]
        if d.text_embeddings:
            paths.append(self._path(d.text_embeddings))
        for manifest in d.manifests:
            manifest_path = self._path(manifest)
            paths.append(manifest_path)
            paths += sorted(manifest_path.parent.glob("samples/*"))
        return paths

    def split(self, datasets: Sequence[LoadedDataset], stored: dict | None = None) -> DataSplit:
        """Seeded split, or the one an upstream run recorded in split.json."""
        if stored is not None:
            missing = [ds.manifest.name for ds in datasets if ds.manifest.name not in stored["train"]]
            if missing:
                raise CheckpointError(f"upstream split has no entry for datasets {missing}")
            return DataSplit(list(datasets), stored["train"], stored["test"])
        spec = SplitSpec(self.config.data.train_fraction, self.config.seed)
        train, test = {}, {}
        for ds in datasets:
            train[ds.manifest.name], test[ds.manifest.name] = split_train_test(ds.manifest, spec)
        return DataSplit(list(datasets), train, test)

    def groups(self, datasets: Sequence[LoadedDataset]) -> dict[str, list[LoadedDataset]]:
        if self.config.experiment.strategy == JOINT:
            return {JOINT: list(datasets)}
        return {ds.manifest.name: [ds] for ds in datasets}

    def text_table(self, labels: Sequence[str]) -> TextEmbeddingTable:
        if self.config.data.text_embeddings:
            return load_text_embeddings(self._path(self.config.data.text_embeddings), labels)
        return synthesize_text_embeddings(labels, self.config.align.text_dim, self.config.seed)

    ### Pretraining

    def alignment_model(self, members: Sequence[LoadedDataset]) -> AlignmentModel:
        c = self.config
        encoder_config = EncoderConfig(
            base_channels=c.encoder.base_channels,
            layer_count=c.encoder.layer_count,
            temporal_kernel=c.encoder.temporal_kernel,
            frozen=c.encoder.frozen,
            seed=c.seed,
        )
        tokenizer_config = TokenizerConfig(
            channels=c.encoder.base_channels,
            token_dim=c.tokenizer.token_dim,
            granularity=c.experiment.granularity,
            seed=c.seed,
        )
        classes = sorted({label for ds in members for label in ds.manifest.labels})
        edges: dict[int, list[tuple[int, int]]] = {}
        for ds in members:
            m = ds.manifest
            mine = list(m.edges) if m.edges is not None else default_skeleton_edges(m.joint_count)
            if edges.setdefault(m.joint_count, mine) != mine:
                logger.warning(f"{m.name}: skeleton edges differ from another {m.joint_count}-joint dataset; inference uses the first")
        joint_counts = [ds.manifest.joint_count for ds in members]
        return AlignmentModel(encoder_config, tokenizer_config, classes, joint_counts, c.align.text_dim, edges)

    def pretrain(self, run: RunDirectory, *, resume: bool = False) -> dict:
        c = self.config
        datasets = self.load_datasets()
        split = self.split(datasets)
        run.write_json("split.json", {"train": split.train, "test": split.test})
        table = self.text_table(sorted({label for ds in datasets for label in ds.manifest.labels}))
        objective = Objective.parse(c.experiment.loss, c.align.temperature)
        schedule = PretrainSchedule(**asdict(c.pretrain), seed=c.seed)
        metrics = run.metrics()

        summary = {}
        for group, members in self.groups(datasets).items():
            console.rule(f"[bold]pretrain {group} ({objective.name})")
            model = self.alignment_model(members)
            result = pretrain(
                model,
                split.prepared(members, "train"),
                table,
                schedule,
                objective,
                metrics=metrics,
                checkpoint_path=run.checkpoint(f"alignment-{group}.pt"),
                resume=resume,
                stage=f"pretrain:{group}",
            )
            run.time_stage(f"pretrain:{group}", result.seconds)
            test = split.prepared(members, "test")
            test_accuracy = classification_accuracy(model, test) if test else None
            metrics.record(f"test:{group}", epoch=schedule.epochs, accuracy=test_accuracy)
            summary[group] = {
                "epochs": len(result.history),
                "loss": result.history[-1].loss if result.history else None,
                "train_accuracy": result.history[-1].accuracy if result.history else None,
                "test_accuracy": test_accuracy,
            }
        run.write_json("pretrain.json", summary)
        show_table("pretraining", summary)
        return summary

    ### Fine-tuning

    def finetune_config(self, kind: PromptKind) -> FinetuneConfig:
        f = self.config.finetune
        description = kind is PromptKind.DESCRIPTION
        return FinetuneConfig(
            steps=f.description_steps if description else f.recognition_steps,
            batch_size=f.description_batch if description else f.recognition_batch,
            learning_rate=f.learning_rate,
            weight_decay=f.weight_decay,
            grad_clip=f.grad_clip,
            log_every=f.log_every,
            seed=self.config.seed,
        )

    def exchanges(self, data: Sequence[PreparedDataset], kind: PromptKind) -> list[Exchange]:
        fmt = self.config.experiment.output_format
        return [ex for ds in data for ex in build_exchanges(ds, kind, self.lexicon, fmt=fmt, descriptions=self.descriptions)]

    def recognition_probe(self, bridge: BridgeModel, exchanges: Sequence[Exchange]) -> float:
        """Greedy recognition accuracy on the given exchanges."""
        features = FeatureCache(bridge)
        correct = 0
        with torch.no_grad():
            for ex in exchanges:
                text = generate(bridge, ex.prompt, features(ex), max_tokens=self.config.decoder.max_tokens)
                correct += extract_label(text, self.lexicon) == ex.label
        return correct / len(exchanges)

    def finetune(self, run: RunDirectory, upstream: RunDirectory) -> dict:
        c = self.config
        if c.experiment.backend != "tiny":
            raise ConfigError("the remote backend is inference-only; fine-tuning needs backend 'tiny'")
        datasets = self.load_datasets()
        split = self.split(datasets, upstream.read_json("split.json"))
        run.write_json("split.json", {"train": split.train, "test": split.test})
        metrics = run.metrics()
        kinds = STAGE_ORDERS[c.experiment.order]

        summary = {}
        for group, members in self.groups(datasets).items():
            console.rule(f"[bold]finetune {group} ({c.experiment.order})")
            skeleton, blob = load_alignment(upstream.existing_checkpoint(f"alignment-{group}.pt"))
            expected = sorted({label for ds in members for label in ds.manifest.labels})
            if skeleton.classes != expected:
                raise CheckpointError(f"alignment checkpoint for {group} was trained on {skeleton.classes}, data has {expected}")
            skeleton.encoder.set_config(freeze(skeleton.encoder.config) if c.encoder.frozen else unfreeze(skeleton.encoder.config))
            history = [EpochMetrics(**h) for h in blob["history"]]
            save_alignment(skeleton, run.checkpoint(f"alignment-{group}.pt"), epoch=blob["epoch"], history=history)

            started = time.monotonic()
            bridge = build_bridge(
                skeleton,
                build_vocabulary(self.lexicon, self.descriptions),
                d_model=c.decoder.d_model,
                layers=c.decoder.layers,
                heads=c.decoder.heads,
                context=c.decoder.context,
                granularity=c.experiment.granularity,
                mask_policy=c.unify.mask_policy,
                projection_depth=c.finetune.projection_depth,
                seed=c.seed,
            )
            lm_losses = pretrain_language_model(
                bridge.decoder,
                bridge.vocab,
                language_corpus(self.lexicon, self.descriptions),
                steps=c.decoder.lm_steps,
                batch_size=c.decoder.lm_batch,
                learning_rate=c.decoder.lm_learning_rate,
                seed=c.seed,
            )
            save_decoder(bridge.decoder, bridge.vocab, run.checkpoint(f"decoder-{group}.pt"))
            metrics.record(f"lm:{group}", step=len(lm_losses), lr=c.decoder.lm_learning_rate, loss=lm_losses[-1] if lm_losses else None)
            run.time_stage(f"lm:{group}", time.monotonic() - started)

            lora = None
            if c.finetune.decoder_mode == "lora":
                lora = LoraConfig(
                    rank=c.finetune.lora_rank,
                    alpha=c.finetune.lora_alpha,
                    dropout=c.finetune.lora_dropout,
                    targets=c.finetune.lora_targets,
                    seed=c.seed,
                )
                attach_lora(bridge.decoder, lora)

            train = split.prepared(members, "train")
            probes = self.exchanges(train, PromptKind.RECOGNITION)
            done: list[str] = []
            probe_accuracy: dict[str, float] = {}
            for kind in kinds:
                stage = f"{kind.value}:{group}"
                result = finetune(bridge, self.exchanges(train, kind), self.finetune_config(kind), metrics=metrics, stage=stage)
                run.time_stage(stage, result.seconds)
                done.append(kind.value)
                accuracy = self.recognition_probe(bridge, probes)
                probe_accuracy[f"after_{kind.value}"] = accuracy
                metrics.record(f"probe:{group}", step=result.steps, accuracy=accuracy)
                logger.info(f"{stage}: train recognition accuracy {accuracy:.3f}")

            save_adapters(bridge, run.checkpoint(f"adapters-{group}.pt"), lora=lora, stages=done)
            summary[group] = {"order": c.experiment.order, "stages": done, "recognition_probe": probe_accuracy}

        run.write_json("finetune.json", summary)
        show_table("fine-tuning (train recognition accuracy)", {g: s["recognition_probe"] for g, s in summary.items()})
        return summary

    ### Inference

    def load_bridge(self, upstream: RunDirectory, group: str) -> BridgeModel:
        c = self.config
        skeleton, _ = load_alignment(upstream.existing_checkpoint(f"alignment-{group}.pt"))
        decoder, vocab = load_decoder(upstream.existing_checkpoint(f"decoder-{group}.pt"))
        bridge = BridgeModel(
            skeleton, decoder, vocab, c.experiment.granularity, c.unify.mask_policy, c.finetune.projection_depth, c.seed
        )
        load_adapters(bridge, upstream.existing_checkpoint(f"adapters-{group}.pt"))
        bridge.eval()
        return bridge

    def remote_backend(self) -> RemoteBackend:
        r = self.config.remote
        return RemoteBackend(
            RemoteConfig(r.endpoint, r.timeout, r.retries, r.backoff, r.max_connections, self.config.decoder.max_tokens)
        )

    def jobs(self, bridge: BridgeModel, data: Sequence[PreparedDataset]) -> list[GenerationJob]:
        jobs = []
        with torch.no_grad():
            for ds in data:
                features = bridge.features(ds.frames, ds.adjacency)
                for sample_id, label, feats in zip(ds.sample_ids, ds.labels, features, strict=True):
                    jobs.append(GenerationJob(sample_id, ds.name, label, assemble_prompt(PromptKind.RECOGNITION), feats))
                    description = assemble_prompt(PromptKind.DESCRIPTION, label.lower(), self.lexicon)
                    jobs.append(GenerationJob(sample_id, ds.name, label, description, feats))
        return jobs

    def score(self, job: GenerationJob, text: str) -> GenerationRecord:
        record = GenerationRecord(job.sample_id, job.prompt.kind.value, text, extract_label(text, self.lexicon), job.label, job.dataset_id)
        references = self.descriptions.get(job.label, [])
        if job.prompt.kind is PromptKind.DESCRIPTION and references:
            # best of the label's reference descriptions by Rouge-L
            scored = [(text_scores(text, ref, self.lexicon), ref) for ref in references]
            record.scores, record.reference_text = max(scored, key=lambda pair: pair[0]["rougeL_f"])
        return record

    async def run_job(self, backend: DecoderBackend, job: GenerationJob, gate: asyncio.Semaphore, seed: int) -> GenerationRecord:
        async with gate:
            try:
                text = await backend.generate(job.prompt, job.features, max_tokens=self.config.decoder.max_tokens, seed=seed)
            except TransportError as e:
                logger.warning(f"{job.dataset_id}/{job.sample_id} ({job.prompt.kind.value}): {e}")
                return GenerationRecord(job.sample_id, job.prompt.kind.value, "", ERROR, job.label, job.dataset_id, error=str(e))
        return self.score(job, text)

    async def generate_records(self, backend: DecoderBackend, jobs: Sequence[GenerationJob]) -> list[GenerationRecord]:
        workers = self.config.remote.max_connections if isinstance(backend, RemoteBackend) else 1
        gate = asyncio.Semaphore(workers)
        return list(await asyncio.gather(*(self.run_job(backend, job, gate, self.config.seed + i) for i, job in enumerate(jobs))))

    async def evaluate(self, run: RunDirectory, upstream: RunDirectory, *, split_name: str = "test") -> dict:
        c = self.config
        datasets = self.load_datasets()
        split = self.split(datasets, upstream.read_json("split.json"))
        remote = self.remote_backend() if c.experiment.backend == "remote" else None
        finetune_summary = upstream.read_json("finetune.json")
        summary: dict = {"order": c.experiment.order, "backend": c.experiment.backend, "split": split_name, "groups": {}}
        all_records: list[GenerationRecord] = []
        try:
            for group, members in self.groups(datasets).items():
                console.rule(f"[bold]evaluate {group} on {split_name} ({c.experiment.backend})")
                started = time.monotonic()
                data = split.prepared(members, split_name)
                if not data:
                    raise ParameterError(f"the {split_name} split of {group} is empty")
                bridge = self.load_bridge(upstream, group)
                backend = remote if remote is not None else TinyBackend(bridge, c.decoder.temperature)
                records = await self.generate_records(backend, self.jobs(bridge, data))
                report = EvaluationReport(records, name=f"{c.experiment.name}:{group}")
                report.write(run.report_dir(group))
                group_summary = report.summary()
                probe = finetune_summary.get(group, {}).get("recognition_probe", {})
                if c.experiment.order == "R->D" and "after_recognition" in probe:
                    group_summary["forgetting"] = probe["after_recognition"] - probe.get("after_description", probe["after_recognition"])
                summary["groups"][group] = group_summary
                all_records += records
                run.time_stage(f"eval:{group}", time.monotonic() - started)
        finally:
            if remote is not None:
                await remote.aclose()

        if len(summary["groups"]) > 1:
            overall = EvaluationReport(all_records, name=f"{c.experiment.name}:all")
            overall.write(run.report_dir("all"))
            summary["groups"]["all"] = overall.summary()
        run.write_json("evaluation.json", summary)
        show_table(
            f"evaluation ({split_name}, {c.experiment.order})",
            {g: {k: v for k, v in s.items() if isinstance(v, (int, float))} for g, s in summary["groups"].items()},
        )
        return summary

    def group_for(self, upstream: RunDirectory, joint_count: int) -> str:
        groups = list(upstream.read_json("finetune.json"))
        if groups == [JOINT]:
            return JOINT
        for group in groups:
            skeleton, _ = load_alignment(upstream.existing_checkpoint(f"alignment-{group}.pt"))
            if joint_count in skeleton.joint_counts:
                return group
        raise PreconditionError(f"no trained model in {upstream.path} handles {joint_count} joints")

    async def describe(self, upstream: RunDirectory, sample_path: Path) -> tuple[str, str, str | None]:
        """Recognition text, extracted label and (when a label was found) a description."""
        seq = resample_to_frames(read_sample(sample_path))
        bridge = self.load_bridge(upstream, self.group_for(upstream, seq.joint_count))
        graph = bridge.skeleton.graph_for(seq.joint_count)
        with torch.no_grad():
            features = bridge.features(torch.as_tensor(seq.frames, dtype=DTYPE), torch.as_tensor(graph.adjacency, dtype=DTYPE))[0]
        max_tokens = self.config.decoder.max_tokens
        backend: DecoderBackend = self.remote_backend() if self.config.experiment.backend == "remote" else TinyBackend(bridge, self.config.decoder.temperature)
        try:
            text = await backend.generate(assemble_prompt(PromptKind.RECOGNITION), features, max_tokens=max_tokens, seed=self.config.seed)
            label = extract_label(text, self.lexicon)
            description = None
            if label != ERROR:
                prompt = assemble_prompt(PromptKind.DESCRIPTION, label.lower(), self.lexicon)
                description = await backend.generate(prompt, features, max_tokens=max_tokens, seed=self.config.seed)
        finally:
            if isinstance(backend, RemoteBackend):
                await backend.aclose()
        return text, label, description


def show_table(title: str, rows: dict[str, dict]) -> None:
    columns = sorted({key for row in rows.values() for key in row})
    table = Table(title=title)
    table.add_column("Group")
    for column in columns:
        table.add_column(column)
    for group, row in rows.items():
        cells = []
        for column in columns:
            value = row.get(column)
            cells.append("-" if value is None else f"{value:.4f}" if isinstance(value, float) else str(value))
        table.add_row(f"[bold]{group}[/]", *cells)
    console.print(table)
