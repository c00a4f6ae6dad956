"""Process-level settings read from the environment (``.env`` is loaded by the CLI)."""

import os

from loguru import logger

THREADS_ENV = "ISDA_THREADS"


def worker_threads(default: int = 1) -> int:
    """Worker-thread cap from ``ISDA_THREADS``; invalid values fall back to ``default``."""
    raw = os.getenv(THREADS_ENV)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer {}={!r}", THREADS_ENV, raw)
        return default
    return max(1, value)
