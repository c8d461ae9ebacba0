"""
Run directories.

    <out_dir>/<name>-s<seed>-<stamp>/
        config.json      config snapshot (re-executable with --from-run)
        inputs.sha256    content hash of every input file
        checkpoints/
        metrics.log
        timings.json
        reports/
        FINALIZED

Once FINALIZED exists every write raises RunFinalizedError.
"""
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from src.config import ExperimentConfig, load_snapshot
from src.errors import CheckpointError, RunFinalizedError
from src.logs import MetricsLog

FINALIZED = "FINALIZED"
RUN_FILE = "run.json"

logger = logging.getLogger(__name__)


def content_hash(path: Path) -> str:
    """Git-style blob hash: sha256 over 'blob <size>\\0' + content."""
    data = Path(path).read_bytes()
    digest = hashlib.sha256(f"blob {len(data)}\0".encode())
    digest.update(data)
    return digest.hexdigest()


@dataclass
class RunRecord:
    name: str
    seed: int
    verb: str
    created: float
    upstream: str | None = None
    inputs: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


class RunDirectory:
    def __init__(self, path: Path, record: RunRecord):
        self.path = Path(path)
        self.record = record

    @classmethod
    def create(cls, out_dir: Path, config: ExperimentConfig, verb: str, upstream: Path | None = None) -> "RunDirectory":
        out_dir = Path(out_dir)
        stamp = time.strftime("%Y%m%d-%H%M%S")
        base = f"{config.experiment.name}-{verb}-s{config.seed}-{stamp}"
        path, n = out_dir / base, 1
        while path.exists():
            n += 1
            path = out_dir / f"{base}-{n}"
        for sub in ("checkpoints", "reports"):
            (path / sub).mkdir(parents=True)
        record = RunRecord(config.experiment.name, config.seed, verb, time.time(), str(upstream) if upstream else None)
        run = cls(path, record)
        (path / "config.json").write_text(config.to_json())
        run._save_record()
        logger.info(f"created run directory {path}")
        return run

    @classmethod
    def open(cls, path: Path) -> "RunDirectory":
        path = Path(path)
        try:
            raw = json.loads((path / RUN_FILE).read_text())
        except (OSError, ValueError) as e:
            raise CheckpointError(f"{path} is not a run directory: {e}") from e
        return cls(path, RunRecord(**raw))

    ### State

    @property
    def finalized(self) -> bool:
        return (self.path / FINALIZED).exists()

    def _writable(self) -> None:
        if self.finalized:
            raise RunFinalizedError(f"run {self.path} is finalized")

    def _save_record(self) -> None:
        (self.path / RUN_FILE).write_text(json.dumps(self.record.__dict__, indent=2, sort_keys=True))

    def config(self) -> ExperimentConfig:
        return load_snapshot(self.path)

    ### Writers

    def hash_inputs(self, paths: Iterable[Path]) -> Path:
        self._writable()
        self.record.inputs = {str(p): content_hash(p) for p in sorted({Path(p) for p in paths}, key=str)}
        lines = [f"{digest}  {p}\n" for p, digest in self.record.inputs.items()]
        target = self.path / "inputs.sha256"
        target.write_text("".join(lines))
        self._save_record()
        return target

    def checkpoint(self, name: str) -> Path:
        """Path for a checkpoint file; the run must still be writable."""
        self._writable()
        return self.path / "checkpoints" / name

    def existing_checkpoint(self, name: str) -> Path:
        path = self.path / "checkpoints" / name
        if not path.exists():
            raise CheckpointError(f"run {self.path} has no checkpoint {name}")
        return path

    def metrics(self) -> MetricsLog:
        self._writable()
        return MetricsLog(self.path / "metrics.log")

    def report_dir(self, name: str) -> Path:
        self._writable()
        path = self.path / "reports" / name
        path.mkdir(parents=True, exist_ok=True)
        return path

    def write_json(self, name: str, payload) -> Path:
        self._writable()
        path = self.path / name
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    def read_json(self, name: str):
        try:
            return json.loads((self.path / name).read_text())
        except (OSError, ValueError) as e:
            raise CheckpointError(f"run {self.path}: cannot read {name}: {e}") from e

    def time_stage(self, stage: str, seconds: float) -> None:
        self._writable()
        self.record.timings[stage] = self.record.timings.get(stage, 0.0) + seconds
        (self.path / "timings.json").write_text(json.dumps(self.record.timings, indent=2, sort_keys=True))
        self._save_record()

    def finalize(self) -> None:
        self._writable()
        (self.path / FINALIZED).write_text(f"{time.time()}\n")
        logger.info(f"finalized run {self.path}")
