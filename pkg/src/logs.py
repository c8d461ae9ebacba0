import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

METRIC_FIELDS = ("timestamp", "stage", "epoch", "step", "lr", "loss", "loss_ce", "loss_con", "accuracy")


class FlushStreamHandler(logging.StreamHandler):
    def emit(self, record):
        super().emit(record)
        self.flush()


def configure_logging(verbose: bool = False, stream=None) -> None:
    """Install a single flushing handler on the root logger."""
    level = logging.DEBUG if verbose else logging.INFO
    root_logger = logging.getLogger()
    root_logger.handlers.clear()
    handler = FlushStreamHandler(stream or sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    root_logger.addHandler(handler)
    root_logger.setLevel(level)


@dataclass
class MetricsLog:
    """Append-only metrics file, one pipe-separated line per event.

    Line format: timestamp|stage|epoch|step|lr|loss|loss_ce|loss_con|accuracy
    """

    path: Path

    def __post_init__(self):
        self.path = Path(self.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)

    def record(
        self,
        stage: str,
        *,
        epoch: int | None = None,
        step: int | None = None,
        lr: float | None = None,
        loss: float | None = None,
        loss_ce: float | None = None,
        loss_con: float | None = None,
        accuracy: float | None = None,
    ) -> None:
        values = [epoch, step, lr, loss, loss_ce, loss_con, accuracy]
        cells = ["" if v is None else (str(v) if isinstance(v, int) else f"{v:.10g}") for v in values]
        log_line = "|".join([f"{time.time()}", stage, *cells]) + "\n"
        with open(self.path, "a") as f:
            f.write(log_line)
