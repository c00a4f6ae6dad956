"""CIFAR-style binary records: one label byte then H*W*K channel-planar pixel bytes."""

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from loguru import logger

from isda_lab.data.dataset import Dataset, Normalization
from isda_lab.errors import DatasetError, DomainError
from isda_lab.guardrails import as_float_array, require_labels
from isda_lab.numeric import Rng
from isda_lab.settings import worker_threads


def record_size(height: int, width: int, channels: int) -> int:
    return 1 + height * width * channels


def _read_records(
    path: Path, height: int, width: int, channels: int, num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    size = record_size(height, width, channels)
    if raw.size == 0 or raw.size % size:
        raise DatasetError(
            f"{path}: {raw.size} bytes is not a whole number of {size}-byte records"
        )
    records = raw.reshape(-1, size)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        raise DatasetError(
            f"{path}: record {int(bad[0])} has label {int(labels[bad[0]])} >= {num_classes}"
        )
    return records[:, 1:].astype(np.float64) / 255.0, labels


def load_binary_records(
    paths: Path | Sequence[Path],
    height: int,
    width: int,
    channels: int,
    *,
    num_classes: int = 10,
    normalization: Normalization | None = None,
) -> Dataset:
    """
    Load one or more record files, preserving file and record order.

    Pixels are scaled to [0, 1] and normalized per channel. Without an explicit
    ``normalization`` the statistics are fitted on the loaded pixels, so pass the
    training set's normalization when loading a test split. Multiple files are read
    on up to ``ISDA_THREADS`` threads.

    Raises:
        DatasetError: Truncated file or a label byte >= num_classes.
    """
    files = [Path(paths)] if isinstance(paths, (str, Path)) else [Path(p) for p in paths]
    if not files:
        raise DatasetError("no record files given")
    for f in files:
        if not f.is_file():
            raise DatasetError(f"record file not found: {f}")

    def read(path: Path) -> tuple[np.ndarray, np.ndarray]:
        return _read_records(path, height, width, channels, num_classes)

    workers = min(worker_threads(), len(files))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(read, files))
    else:
        parts = [read(f) for f in files]

    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([y for _, y in parts])
    norm = normalization or Normalization.fit(pixels, channels)
    if norm.channels != channels:
        raise DatasetError(f"normalization has {norm.channels} channels, expected {channels}")
    logger.info("Loaded {} records from {} file(s)", labels.shape[0], len(files))
    return Dataset(
        norm.apply(pixels),
        labels,
        num_classes,
        image_shape=(channels, height, width),
        normalization=norm,
    )


def export_binary_records(path: Path, pixels: object, labels: object, num_classes: int) -> Path:
    """
    Write unit-range pixel rows as records; values are quantized to round(255 * x).

    Raises:
        DomainError: Pixels outside [0, 1] or labels that do not fit the class range.
    """
    X = as_float_array(pixels, "pixels", ndim=2)
    if X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise DomainError("pixels must lie in [0, 1] before export")
    if num_classes > 256:
        raise DomainError("label bytes cannot encode more than 256 classes")
    y = require_labels(labels, num_classes)
    if y.shape[0] != X.shape[0]:
        raise DomainError(f"{X.shape[0]} pixel rows but {y.shape[0]} labels")
    records = np.empty((X.shape[0], 1 + X.shape[1]), dtype=np.uint8)
    records[:, 0] = y
    records[:, 1:] = np.rint(X * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(records.tobytes())
    logger.debug("Exported {} records to {}", X.shape[0], path)
    return path


def pad_crop_flip(
    inputs: np.ndarray, image_shape: tuple[int, int, int], rng: Rng, *, pad: int = 4
) -> np.ndarray:
    """
    Zero-pad every image by ``pad`` pixels, crop back to its size at a random offset and
    flip horizontally with probability 1/2. Rows are flat channel-planar images.
    """
    K, H, W = image_shape
    n = inputs.shape[0]
    images = inputs.reshape(n, K, H, W)
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    rows = oy[:, None] + np.arange(H)[None, :]
    cols = ox[:, None] + np.arange(W)[None, :]
    out = padded[
        np.arange(n)[:, None, None, None],
        np.arange(K)[None, :, None, None],
        rows[:, None, :, None],
        cols[:, None, None, :],
    ]
    flip = rng.uniform(size=n) < 0.5
    out[flip] = out[flip][..., ::-1]
    return out.reshape(n, -1)
