"""Run artifacts: append-only CSV tables and the JSON run summary."""

import csv
import json
import math
import os
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from loguru import logger

from isda_lab.training import EpochRecord

METRICS_COLUMNS = ("epoch", "iteration", "lambda", "train_loss", "test_error", "wall_ms")
BOUND_COLUMNS = ("iteration", "surrogate", "mc_estimate", "mc_stderr")
SWEEP_COLUMNS = (
    "setting",
    "lambda0",
    "m",
    "cov_mode",
    "schedule",
    "seed",
    "final_error",
    "last_k_error",
    "wall_ms",
)


class CsvLog:
    """
    Append-only CSV file. Every ``append`` flushes and fsyncs, so a crash leaves a
    valid prefix of complete rows.
    """

    def __init__(self, path: Path, columns: Sequence[str]):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._fh)
        self._write(self.columns)

    def _write(self, row: Sequence[Any]) -> None:
        self._writer.writerow(row)
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append(self, row: dict[str, Any]) -> None:
        missing = [c for c in self.columns if c not in row]
        if missing:
            raise KeyError(f"row is missing columns {missing}")
        self._write([_format(row[c]) for c in self.columns])

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def _format(value: Any) -> Any:
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return value


def metrics_row(record: EpochRecord) -> dict[str, Any]:
    return {
        "epoch": record.epoch,
        "iteration": record.iteration,
        "lambda": record.lam,
        "train_loss": record.train_loss,
        "test_error": record.test_error,
        "wall_ms": record.wall_ms,
    }


def read_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _jsonable(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_summary(out_dir: Path, summary: dict[str, Any]) -> Path:
    """Write ``summary.json``; non-finite floats become null."""
    path = Path(out_dir) / "summary.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(summary), indent=2), encoding="utf-8")
    logger.info("Wrote summary {}", path)
    return path


def read_summary(out_dir: Path) -> dict[str, Any]:
    path = Path(out_dir) / "summary.json"
    return json.loads(path.read_text(encoding="utf-8"))
