"""Loguru sinks: one console stream plus an optional log file per run directory."""

import sys
from pathlib import Path

from loguru import logger

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | "
    "<level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> | "
    "<level>{message}</level>"
)
RUN_LOG_FORMAT = (
    "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {extra[command]} | "
    "{name}:{function}:{line} | {message}"
)
RUN_LOG_NAME = "run.log"


def configure_logging(
    level: str = "INFO",
    *,
    sink: object = sys.stderr,
    colorize: bool = True,
) -> None:
    """
    Replace all sinks with a single console sink.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL).
        sink: Output sink (default: stderr).
        colorize: Emit ANSI colours (disable when the sink is a file).
    """
    logger.remove()
    logger.configure(extra={"command": "-"})
    logger.add(sink, format=CONSOLE_FORMAT, level=level, colorize=colorize)


def add_run_log(out_dir: Path, command: str, level: str = "DEBUG") -> int:
    """
    Mirror records into ``<out_dir>/run.log`` tagged with ``command``.

    Returns the sink id; pass it to ``logger.remove`` when the run ends.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.configure(extra={"command": command})
    return logger.add(
        out_dir / RUN_LOG_NAME,
        format=RUN_LOG_FORMAT,
        level=level,
        colorize=False,
        mode="w",
        encoding="utf-8",
    )
