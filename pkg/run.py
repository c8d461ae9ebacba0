#!/usr/bin/env python3
"""
Developer entry point for emotok: virtualenv setup, checks, and end-to-end
runs of the skeleton-to-language pipeline through `python -m src.cli`.

    ./run.py setup
    ./run.py pipeline desk --order both
    ./run.py describe runs/desk/<finetune run> data/sample.txt
"""
import argparse
import os
import subprocess
import sys
from pathlib import Path

VENV_DIR: Path = Path(".venv").resolve()
RUNS_DIR = Path("runs")
ORDERS = ("R->D", "D->R")


def get_venv_python() -> Path:
    if sys.platform.startswith("win"):
        return VENV_DIR / "Scripts" / "python.exe"
    return VENV_DIR / "bin" / "python"


def emotok(*args: str) -> list[str]:
    return [str(get_venv_python()), "-m", "src.cli", *args]


def run_command(cmd: list[str], env: dict | None = None, timeout: int | None = None) -> None:
    print("running:", " ".join(map(str, cmd)))
    try:
        subprocess.run(cmd, check=True, env=env, timeout=timeout)
    except subprocess.TimeoutExpired:
        print(f"command timed out after {timeout} seconds")
        raise


def latest_run(out_dir: Path, verb: str) -> Path:
    """Newest finalized `<name>-<verb>-s<seed>-<stamp>` directory; unfinished runs are skipped."""
    runs = sorted((p for p in out_dir.glob(f"*-{verb}-*") if (p / "FINALIZED").exists()), key=lambda p: p.stat().st_mtime)
    if not runs:
        sys.exit(f"no finalized {verb} run under {out_dir}; run the {verb} stage first")
    return runs[-1]


def run_pipeline(preset: str, orders: list[str | None], extra_args: list[str]) -> list[Path]:
    """
    Pretrain once, then fine-tune and evaluate in each task order from the
    same pretraining run, and compare the evaluations. Returns the eval runs.
    An order of None keeps whatever the preset and config say.
    """
    out_dir = RUNS_DIR / preset
    common = ["--experiment", preset, "--out-dir", str(out_dir), *extra_args]
    print(f"\n=== alignment pretraining ({preset}) ===")
    run_command(emotok("pretrain", *common))
    pretrain_run = latest_run(out_dir, "pretrain")

    evaluations = []
    for order in orders:
        chosen = [] if order is None else ["--order", order]
        print(f"\n=== fine-tuning {order or '(preset order)'} ===")
        run_command(emotok("finetune", "--run", str(pretrain_run), *chosen, *common))
        finetune_run = latest_run(out_dir, "finetune")
        print("\n=== evaluating on the test split ===")
        run_command(emotok("eval", "--run", str(finetune_run), *chosen, *common))
        evaluations.append(latest_run(out_dir, "eval"))

    print("\n=== training curves and order comparison ===")
    run_command(emotok("analyze", str(pretrain_run), *map(str, evaluations), "--output", str(out_dir / "analysis")))
    if len(evaluations) > 1:
        run_command(emotok("analyze", "--compare", *map(str, evaluations), "--output", str(out_dir / "analysis")))
    return evaluations


def setup_project() -> None:
    if not VENV_DIR.exists():
        print("creating virtual environment...")
        subprocess.run([sys.executable, "-m", "venv", str(VENV_DIR)], check=True)

    venv_python: Path = get_venv_python()

    # attempt to upgrade pip; if pip is missing, bootstrap with ensurepip
    try:
        run_command([str(venv_python), "-m", "pip", "install", "--upgrade", "pip"])
    except subprocess.CalledProcessError:
        print("pip not found; bootstrapping pip with ensurepip...")
        run_command([str(venv_python), "-m", "ensurepip", "--upgrade"])
        run_command([str(venv_python), "-m", "pip", "install", "--upgrade", "pip"])

    run_command([str(venv_python), "-m", "pip", "install", "uv", "mypy", "ruff"])

    try:
        run_command([str(venv_python), "-m", "uv", "pip", "uninstall", "emotok"])
    except subprocess.CalledProcessError:
        print("emotok not installed yet; skipping uninstall.")

    env = os.environ.copy()
    env["UV_PREVIEW"] = "1"
    run_command([str(venv_python), "-m", "uv", "pip", "install", "-e", "."], env=env)
    # smoke import of the training and metric stack
    run_command([str(venv_python), "-c", "import torch, rouge_score, nltk; print('torch', torch.__version__)"])


def run_tests(extra_args: list[str]) -> None:
    run_command([str(get_venv_python()), "-m", "unittest", "discover", "-s", "src/tests", "-t", "."] + extra_args)


def run_lint() -> None:
    run_command([str(get_venv_python()), "-m", "ruff", "check", "src", "run.py"])


def run_type() -> None:
    run_command([str(get_venv_python()), "-m", "mypy", "src"])


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="emotok setup, checks and pipeline runs.")
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("setup", help="Create .venv and install emotok in editable mode")
    tests = commands.add_parser("test", help="Run the unittest suite")
    tests.add_argument("extra_args", nargs=argparse.REMAINDER)
    commands.add_parser("lint", help="ruff over src and run.py")
    commands.add_parser("type", help="mypy over src")
    commands.add_parser("check", help="lint and type")
    commands.add_parser("all", help="setup, lint, type and test")
    commands.add_parser("presets", help="List experiment presets")
    pipeline = commands.add_parser("pipeline", help="pretrain, finetune, eval and analyze one preset")
    pipeline.add_argument("preset")
    pipeline.add_argument("--order", choices=[*ORDERS, "both"], help="Fine-tuning task order (default: the preset's)")
    describe = commands.add_parser("describe", help="Label and describe one skeleton sample")
    describe.add_argument("run", help="Fine-tuning run directory")
    describe.add_argument("sample", help="Skeleton sample file")
    cli = commands.add_parser("cli", help="Any emotok verb, e.g. `cli synth --profile tiny --out data/tiny`")
    cli.add_argument("extra_args", nargs=argparse.REMAINDER)
    # unrecognized options after a pipeline preset go to every emotok stage
    args, stage_args = parser.parse_known_args(argv)
    if stage_args and args.command != "pipeline":
        parser.error(f"unrecognized arguments: {' '.join(stage_args)}")

    try:
        if args.command == "setup":
            setup_project()
        elif args.command == "test":
            run_tests(args.extra_args)
        elif args.command == "lint":
            run_lint()
        elif args.command == "type":
            run_type()
        elif args.command == "check":
            run_lint()
            run_type()
        elif args.command == "all":
            setup_project()
            run_lint()
            run_type()
            run_tests([])
        elif args.command == "presets":
            run_command(emotok("experiments"))
        elif args.command == "pipeline":
            orders: list[str | None] = list(ORDERS) if args.order == "both" else [args.order]
            run_pipeline(args.preset, orders, stage_args)
        elif args.command == "describe":
            run_command(emotok("describe", "--run", args.run, "--sample", args.sample))
        elif args.command == "cli":
            run_command(emotok(*args.extra_args))
    except subprocess.CalledProcessError as e:
        sys.exit(f"emotok stage failed with exit code {e.returncode}: {' '.join(map(str, e.cmd))}")
    except KeyboardInterrupt:
        sys.exit("\ninterrupted")


if __name__ == "__main__":
    main()
