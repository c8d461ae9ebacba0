"""
emotok command line.

    emotok synth --profile emilya-like --seed 7 --out data/emilya
    emotok ingest --manifest data/emilya/manifest.json
    emotok pretrain --config config.toml
    emotok finetune --run runs/<pretrain run> --order R->D
    emotok eval --run runs/<finetune run> [--backend remote]
    emotok describe --run runs/<finetune run> --sample sample.txt
    emotok analyze runs/<run> [...]
    emotok mock-server --port 8765
"""
import argparse
import asyncio
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from rich.console import Console
from rich.table import Table

from src.analyze import analyze_run, compare_runs
from src.config import ExperimentConfig, apply_paper_scale, load_config, parse_assignments, validate_paths
from src.errors import ConfigError, EmotokError
from src.experiments import get_experiment, get_experiment_overrides, list_experiments
from src.logs import configure_logging
from src.orchestrator import Pipeline, downstream_config, inference_config
from src.remote import MOCK_RECOGNITION_TEXT, serve_mock
from src.runs import RunDirectory
from src.skeldata import PROFILES, get_profile, load_dataset, nearest_centroid_accuracy, synthesize_dataset, write_dataset

console = Console()
err_console = Console(stderr=True)
logger = logging.getLogger(__name__)

DEFAULT_CONFIG = Path("config.toml")


### Config assembly


def _merge(*layers: dict[str, dict[str, Any]]) -> dict[str, dict[str, Any]]:
    merged: dict[str, dict[str, Any]] = {}
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update(values)
    return merged


def flag_overrides(args: argparse.Namespace) -> dict[str, dict[str, Any]]:
    pairs = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "backend": args.backend,
        "order": args.order,
        "granularity": args.granularity,
        "strategy": args.strategy,
        "output_format": args.format,
        "loss": args.loss,
    }
    experiment = {k: v for k, v in pairs.items() if v is not None}
    if args.paper_scale:
        experiment["paper_scale"] = True
    return {"experiment": experiment} if experiment else {}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """config file (or --from-run snapshot) < preset < --set < explicit flags."""
    preset: dict[str, dict[str, Any]] = {}
    if args.experiment:
        if get_experiment(args.experiment) is None:
            raise ConfigError(f"unknown experiment preset {args.experiment!r}; available: {', '.join(list_experiments())}")
        preset = get_experiment_overrides(args.experiment)
    overrides = _merge(preset, parse_assignments(args.set or []), flag_overrides(args))

    if args.from_run:
        config = RunDirectory.open(Path(args.from_run)).config().with_overrides(overrides)
        if args.paper_scale:
            config = apply_paper_scale(config)
    else:
        path = Path(args.config) if args.config else (DEFAULT_CONFIG if DEFAULT_CONFIG.exists() else None)
        config = load_config(path, flags=overrides)
    validate_paths(config)
    return config


### Verbs


def cmd_synth(args: argparse.Namespace) -> int:
    overrides = {"seed": args.seed}
    if args.samples_per_label is not None:
        overrides["samples_per_label"] = args.samples_per_label
    dataset = synthesize_dataset(get_profile(args.profile, **overrides))
    manifest = write_dataset(dataset, Path(args.out))
    console.log(f"[bold green]wrote {len(dataset.sequences)} samples ({dataset.manifest.joint_count} joints) to {manifest}[/]")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    dataset = load_dataset(Path(args.manifest))
    m = dataset.manifest
    lengths = [s.frame_count for s in dataset.sequences]
    table = Table(title=f"dataset {m.name}")
    table.add_column("Field")
    table.add_column("Value")
    table.add_row("joints", str(m.joint_count))
    table.add_row("fps", f"{m.fps:g}")
    table.add_row("samples", str(len(dataset.sequences)))
    table.add_row("frames (min/max)", f"{min(lengths)}/{max(lengths)}" if lengths else "-")
    for label, count in sorted(Counter(s.label for s in dataset.sequences).items()):
        table.add_row(f"label {label}", str(count))
    if len({s.label for s in dataset.sequences}) > 1:
        table.add_row("velocity probe accuracy", f"{nearest_centroid_accuracy(dataset.sequences):.3f}")
    console.print(table)
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    if args.resume:
        run = RunDirectory.open(Path(args.resume))
        config = run.config()
    else:
        config = build_config(args)
        run = RunDirectory.create(Path(config.experiment.out_dir), config, "pretrain")
    pipeline = Pipeline(config)
    run.hash_inputs(pipeline.input_files())
    pipeline.pretrain(run, resume=bool(args.resume))
    run.finalize()
    console.log(f"[bold green]pretraining run: {run.path}[/]")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    upstream = RunDirectory.open(Path(args.run))
    config = downstream_config(upstream.config(), build_config(args))
    if config.experiment.backend != "tiny":
        raise ConfigError("the remote backend is inference-only; fine-tuning needs backend 'tiny'")
    pipeline = Pipeline(config)
    run = RunDirectory.create(Path(config.experiment.out_dir), config, "finetune", upstream=upstream.path)
    run.hash_inputs(pipeline.input_files() + sorted(upstream.path.glob("checkpoints/alignment-*.pt")))
    pipeline.finetune(run, upstream)
    run.finalize()
    console.log(f"[bold green]fine-tuning run: {run.path}[/]")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    upstream = RunDirectory.open(Path(args.run))
    config = inference_config(upstream.config(), build_config(args))
    pipeline = Pipeline(config)
    run = RunDirectory.create(Path(config.experiment.out_dir), config, "eval", upstream=upstream.path)
    run.hash_inputs(pipeline.input_files() + sorted(upstream.path.glob("checkpoints/*.pt")))
    asyncio.run(pipeline.evaluate(run, upstream, split_name=args.split))
    run.finalize()
    console.log(f"[bold green]evaluation run: {run.path}[/]")
    return 0


def cmd_describe(args: argparse.Namespace) -> int:
    upstream = RunDirectory.open(Path(args.run))
    config = inference_config(upstream.config(), build_config(args))
    text, label, description = asyncio.run(Pipeline(config).describe(upstream, Path(args.sample)))
    console.print(f"[bold]label:[/] {label}")
    console.print(f"[bold]answer:[/] {text}")
    console.print(f"[bold]description:[/] {description if description is not None else '(no label recognized)'}")
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    output = Path(args.output)
    if args.compare:
        markdown = compare_runs([Path(r) for r in args.runs])
        output.mkdir(parents=True, exist_ok=True)
        (output / "comparison.md").write_text(markdown)
        console.print(markdown)
        return 0
    for run in args.runs:
        analyze_run(Path(run), output)
    return 0


def cmd_mock_server(args: argparse.Namespace) -> int:
    serve_mock(args.host, args.port, args.recognition_text)
    return 0


def cmd_experiments(args: argparse.Namespace) -> int:
    table = Table(title="experiment presets")
    table.add_column("Name")
    table.add_column("Axis")
    table.add_column("Description")
    for name in list_experiments():
        experiment = get_experiment(name)
        table.add_row(f"[green]{name}[/]", experiment.type.value, experiment.description)
    console.print(table)
    return 0


### Parser


def build_parser() -> argparse.ArgumentParser:
    base = argparse.ArgumentParser(add_help=False)
    base.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="Configuration file (default: config.toml when present)")
    common.add_argument("--seed", type=int, help="Experiment seed")
    common.add_argument("--out-dir", help="Directory for run directories")
    common.add_argument("--paper-scale", action="store_true", help="Full-scale schedules and model sizes")
    common.add_argument("--backend", choices=["tiny", "remote"], help="Decoder backend")
    common.add_argument("--order", help="Fine-tuning task order, D->R or R->D")
    common.add_argument("--granularity", choices=["semantic", "spatial", "temporal", "spatiotemporal"])
    common.add_argument("--strategy", choices=["joint", "separate"])
    common.add_argument("--format", choices=["A", "B", "C"], help="Recognition answer format")
    common.add_argument("--loss", help="Pretraining loss, e.g. ce+se, ce+st, L_se")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="Override any config value")
    common.add_argument("--from-run", help="Re-execute the config snapshot of a run directory")
    common.add_argument("-e", "--experiment", help="Apply a named experiment preset")

    parser = argparse.ArgumentParser(prog="emotok", description="Skeleton-based emotion recognition and description")
    verbs = parser.add_subparsers(dest="verb", required=True)

    synth = verbs.add_parser("synth", parents=[base], help="Write a synthetic dataset")
    synth.add_argument("--profile", required=True, choices=sorted(PROFILES))
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--samples-per-label", type=int)
    synth.add_argument("--out", required=True, help="Output directory")
    synth.set_defaults(handler=cmd_synth)

    ingest = verbs.add_parser("ingest", parents=[base], help="Load and validate a dataset manifest")
    ingest.add_argument("--manifest", required=True)
    ingest.set_defaults(handler=cmd_ingest)

    pretrain = verbs.add_parser("pretrain", parents=[base, common], help="Skeleton-text alignment pretraining")
    pretrain.add_argument("--resume", help="Continue an unfinished pretraining run directory")
    pretrain.set_defaults(handler=cmd_pretrain)

    finetune = verbs.add_parser("finetune", parents=[base, common], help="Recognition/description fine-tuning")
    finetune.add_argument("--run", required=True, help="Pretraining run directory")
    finetune.set_defaults(handler=cmd_finetune)

    evaluate = verbs.add_parser("eval", parents=[base, common], help="Generate and score on a split")
    evaluate.add_argument("--run", required=True, help="Fine-tuning run directory")
    evaluate.add_argument("--split", choices=["test", "train"], default="test")
    evaluate.set_defaults(handler=cmd_eval)

    describe = verbs.add_parser("describe", parents=[base, common], help="Label and describe one sample file")
    describe.add_argument("--run", required=True, help="Fine-tuning run directory")
    describe.add_argument("--sample", required=True, help="Skeleton sample file")
    describe.set_defaults(handler=cmd_describe)

    analyze = verbs.add_parser("analyze", parents=[base], help="Summaries and plots for run directories")
    analyze.add_argument("runs", nargs="+")
    analyze.add_argument("--compare", action="store_true")
    analyze.add_argument("--output", "-o", default="analysis")
    analyze.set_defaults(handler=cmd_analyze)

    mock = verbs.add_parser("mock-server", parents=[base], help="Serve the bundled mock LLM service")
    mock.add_argument("--host", default="127.0.0.1")
    mock.add_argument("--port", type=int, default=8765)
    mock.add_argument("--recognition-text", default=MOCK_RECOGNITION_TEXT)
    mock.set_defaults(handler=cmd_mock_server)

    experiments = verbs.add_parser("experiments", parents=[base], help="List experiment presets")
    experiments.set_defaults(handler=cmd_experiments)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except EmotokError as e:
        err_console.print(f"error: {e}", style="bold red", markup=False, highlight=False)
        logger.debug("command failed", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
