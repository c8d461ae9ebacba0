#!/usr/bin/env python3
"""
Analyze run directories.
Parses metrics.log, plots training curves and writes Markdown summaries.
"""
import argparse
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from rich.console import Console  # noqa: E402
from rich.markdown import Markdown  # noqa: E402

from src.errors import CheckpointError  # noqa: E402
from src.experiments import get_experiment, list_experiments  # noqa: E402
from src.logs import METRIC_FIELDS  # noqa: E402

console = Console()

NUMERIC_FIELDS = ("timestamp", "epoch", "step", "lr", "loss", "loss_ce", "loss_con", "accuracy")


def parse_metrics_log(log_path: Path) -> pd.DataFrame:
    """
    Parse a metrics log into a pandas DataFrame.

    Log format: timestamp|stage|epoch|step|lr|loss|loss_ce|loss_con|accuracy
    """
    log_path = Path(log_path)
    if not log_path.exists():
        raise CheckpointError(f"metrics log not found: {log_path}")
    if log_path.stat().st_size == 0:
        return pd.DataFrame(columns=list(METRIC_FIELDS))
    df = pd.read_csv(log_path, sep="|", header=None, names=list(METRIC_FIELDS), dtype={"stage": str})
    for column in NUMERIC_FIELDS:
        df[column] = pd.to_numeric(df[column], errors="coerce")
    df["kind"] = df["stage"].str.split(":").str[0]
    df["group"] = df["stage"].str.split(":").str[1].fillna("")
    return df


def stage_summary(df: pd.DataFrame) -> pd.DataFrame:
    """One row per stage: event count, first/last/min loss, last accuracy."""
    rows = []
    for stage, frame in df.groupby("stage", sort=False):
        losses = frame["loss"].dropna()
        accuracies = frame["accuracy"].dropna()
        rows.append({
            "stage": stage,
            "events": len(frame),
            "first_loss": losses.iloc[0] if len(losses) else None,
            "last_loss": losses.iloc[-1] if len(losses) else None,
            "min_loss": losses.min() if len(losses) else None,
            "last_accuracy": accuracies.iloc[-1] if len(accuracies) else None,
        })
    return pd.DataFrame(rows)


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and pd.isna(value)):
        return "-"
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def generate_summary_table(run_dir: Path, summary: pd.DataFrame) -> str:
    """Markdown summary of a run: config, stage table, timings, evaluation."""
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    experiment = config.get("experiment", {})
    name = experiment.get("name", run_dir.name)

    markdown = f"## Run: {run_dir.name}\n\n"
    preset = get_experiment(name)
    if preset is not None:
        markdown += f"**Preset**: {name} ({preset.description})\n\n"
    if experiment:
        markdown += (
            f"**Strategy**: {experiment.get('strategy')} | **Granularity**: {experiment.get('granularity')} | "
            f"**Order**: {experiment.get('order')} | **Loss**: {experiment.get('loss')} | "
            f"**Format**: {experiment.get('output_format')} | **Seed**: {experiment.get('seed')}\n\n"
        )

    markdown += "### Stages\n\n"
    markdown += "| Stage | Events | First loss | Last loss | Min loss | Last accuracy |\n"
    markdown += "|-------|--------|------------|-----------|----------|---------------|\n"
    for _, row in summary.iterrows():
        markdown += (
            f"| {row['stage']} | {row['events']} | {_cell(row['first_loss'])} | {_cell(row['last_loss'])} | "
            f"{_cell(row['min_loss'])} | {_cell(row['last_accuracy'])} |\n"
        )

    timings_path = run_dir / "timings.json"
    if timings_path.exists():
        markdown += "\n### Wall-clock time\n\n| Stage | Seconds |\n|-------|---------|\n"
        for stage, seconds in json.loads(timings_path.read_text()).items():
            markdown += f"| {stage} | {seconds:.1f} |\n"

    evaluation_path = run_dir / "evaluation.json"
    if evaluation_path.exists():
        evaluation = json.loads(evaluation_path.read_text())
        markdown += f"\n### Evaluation ({evaluation.get('split')}, order {evaluation.get('order')})\n\n"
        markdown += "| Group | Accuracy | Error rate | Rouge-1 | Rouge-L | BLEU | METEOR | Forgetting |\n"
        markdown += "|-------|----------|------------|---------|---------|------|--------|------------|\n"
        for group, values in evaluation.get("groups", {}).items():
            cells = [_cell(values.get(k)) for k in ("accuracy", "error_rate", "rouge1_f", "rougeL_f", "bleu", "meteor", "forgetting")]
            markdown += f"| {group} | " + " | ".join(cells) + " |\n"
    return markdown


def plot_training_curves(df: pd.DataFrame, run_name: str, save_dir: Path) -> list[Path]:
    """Loss per epoch for pretraining, loss per step for fine-tuning, accuracy per epoch."""
    save_dir.mkdir(parents=True, exist_ok=True)
    written = []

    pretrain = df[df["kind"] == "pretrain"]
    if not pretrain.empty:
        fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(14, 6))
        for stage, frame in pretrain.groupby("stage", sort=False):
            ax_loss.plot(frame["epoch"], frame["loss"], label=f"{stage} total", linewidth=2)
            if frame["loss_con"].notna().any():
                ax_loss.plot(frame["epoch"], frame["loss_con"], label=f"{stage} contrastive", linestyle="--")
            ax_acc.plot(frame["epoch"], frame["accuracy"], label=stage, linewidth=2)
        ax_loss.set_title(f"Pretraining loss - {run_name}", fontsize=14)
        ax_loss.set_xlabel("Epoch", fontsize=12)
        ax_loss.set_ylabel("Loss", fontsize=12)
        ax_acc.set_title("Training accuracy", fontsize=14)
        ax_acc.set_xlabel("Epoch", fontsize=12)
        ax_acc.set_ylabel("Accuracy", fontsize=12)
        for ax in (ax_loss, ax_acc):
            ax.grid(True, alpha=0.3)
            ax.legend(fontsize=10)
        fig.tight_layout()
        path = save_dir / f"{run_name}_pretrain.png"
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)

    finetune = df[df["kind"].isin(["recognition", "description"])]
    if not finetune.empty:
        plt.figure(figsize=(12, 8))
        for stage, frame in finetune.groupby("stage", sort=False):
            plt.plot(frame["step"], frame["loss"], label=stage, linewidth=2, marker="o", markersize=3)
        plt.title(f"Fine-tuning loss - {run_name}", fontsize=14)
        plt.xlabel("Step", fontsize=12)
        plt.ylabel("Loss", fontsize=12)
        plt.grid(True, alpha=0.3)
        plt.legend(fontsize=10)
        plt.tight_layout()
        path = save_dir / f"{run_name}_finetune.png"
        plt.savefig(path, dpi=150)
        plt.close()
        written.append(path)

    return written


def analyze_run(run_dir: Path, output_dir: Optional[Path] = None) -> Path:
    """Write <output>/<run>_summary.md and plots; returns the summary path."""
    run_dir = Path(run_dir)
    output_dir = Path(output_dir) if output_dir is not None else Path("analysis")
    df = parse_metrics_log(run_dir / "metrics.log")
    markdown = generate_summary_table(run_dir, stage_summary(df))
    plots = plot_training_curves(df, run_dir.name, output_dir / "plots") if not df.empty else []
    if plots:
        markdown += "\n### Plots\n\n" + "".join(f"![{p.stem}](plots/{p.name})\n" for p in plots)
    summary_path = output_dir / f"{run_dir.name}_summary.md"
    summary_path.parent.mkdir(parents=True, exist_ok=True)
    summary_path.write_text(markdown)
    console.print(Markdown(markdown))
    console.log(f"[bold green]wrote {summary_path}[/]")
    return summary_path


def compare_runs(run_dirs: Sequence[Path]) -> str:
    """Markdown table comparing evaluation results of several runs, e.g. D->R vs R->D."""
    markdown = "| Run | Order | Group | Accuracy | Rouge-L | BLEU | METEOR | Forgetting |\n"
    markdown += "|-----|-------|-------|----------|---------|------|--------|------------|\n"
    for run_dir in run_dirs:
        path = Path(run_dir) / "evaluation.json"
        if not path.exists():
            console.log(f"[bold yellow]{run_dir} has no evaluation.json; skipped[/]")
            continue
        evaluation = json.loads(path.read_text())
        for group, values in evaluation.get("groups", {}).items():
            cells = [_cell(values.get(k)) for k in ("accuracy", "rougeL_f", "bleu", "meteor", "forgetting")]
            markdown += f"| {Path(run_dir).name} | {evaluation.get('order')} | {group} | " + " | ".join(cells) + " |\n"
    return markdown


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main function for analysis script."""
    parser = argparse.ArgumentParser(description="Analyze emotok run directories")
    parser.add_argument("runs", nargs="*", help="Run directories to analyze")
    parser.add_argument("--compare", "-c", action="store_true", help="Compare evaluation results across the given runs")
    parser.add_argument("--list", "-l", action="store_true", help="List available experiment presets")
    parser.add_argument("--output", "-o", default="analysis", help="Output directory for analysis results")
    args = parser.parse_args(argv)

    if args.list or not args.runs:
        console.log("[bold]Available experiments:[/]")
        for name in list_experiments():
            experiment = get_experiment(name)
            console.log(f"  [green]{name}[/]: {experiment.description}")
        return

    output_dir = Path(args.output)
    if args.compare:
        markdown = compare_runs([Path(r) for r in args.runs])
        output_dir.mkdir(parents=True, exist_ok=True)
        (output_dir / "comparison.md").write_text(markdown)
        console.print(Markdown(markdown))
        return
    for run in args.runs:
        analyze_run(Path(run), output_dir)


if __name__ == "__main__":
    main()
