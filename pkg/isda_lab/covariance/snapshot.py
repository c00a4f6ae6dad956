"""Versioned little-endian binary codec for tracker state.

Layout::

    magic "ISDA" | u16 version | u32 C | u32 A | u8 mode tag
    C x ( u64 count | A x f64 mean | cov payload )
    [ A*A x f64 pooled scatter ]        # only when the mode keeps it

The cov payload is A*A values (full), A values (diagonal) or empty.
"""

import struct
from dataclasses import dataclass

import numpy as np

from isda_lab.errors import SnapshotError

MAGIC = b"ISDA"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHIIB")
_COUNT = struct.Struct("<Q")
_F64 = np.dtype("<f8")


@dataclass(frozen=True)
class SnapshotPayload:
    """Decoded snapshot contents; arrays are freshly allocated float64."""

    mode_tag: int
    num_classes: int
    feature_dim: int
    counts: np.ndarray
    means: np.ndarray
    covs: np.ndarray | None
    pooled_scatter: np.ndarray | None


def _cov_width(cov_ndim: int, feature_dim: int) -> int:
    return {0: 0, 1: feature_dim, 2: feature_dim * feature_dim}[cov_ndim]


def pack_snapshot(
    mode_tag: int,
    counts: np.ndarray,
    means: np.ndarray,
    covs: np.ndarray | None,
    pooled_scatter: np.ndarray | None,
) -> bytes:
    """Serialize tracker arrays; ``covs`` is (C, A, A), (C, A) or None."""
    num_classes, feature_dim = means.shape
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, num_classes, feature_dim, mode_tag)]
    for j in range(num_classes):
        parts.append(_COUNT.pack(int(counts[j])))
        parts.append(np.ascontiguousarray(means[j], dtype=_F64).tobytes())
        if covs is not None:
            parts.append(np.ascontiguousarray(covs[j], dtype=_F64).tobytes())
    if pooled_scatter is not None:
        parts.append(np.ascontiguousarray(pooled_scatter, dtype=_F64).tobytes())
    return b"".join(parts)


def unpack_snapshot(
    data: bytes,
    *,
    cov_ndim: dict[int, int],
    has_pooled: dict[int, bool],
) -> SnapshotPayload:
    """
    Decode a snapshot.

    Args:
        data: Raw bytes.
        cov_ndim: Mode tag -> stored covariance rank (0, 1 or 2).
        has_pooled: Mode tag -> whether a pooled scatter block follows.

    Raises:
        SnapshotError: Wrong magic, unsupported version, unknown mode or size mismatch.
    """
    if len(data) < _HEADER.size:
        raise SnapshotError("snapshot shorter than its header")
    magic, version, num_classes, feature_dim, mode_tag = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise SnapshotError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise SnapshotError(f"unsupported snapshot version {version}")
    if mode_tag not in cov_ndim:
        raise SnapshotError(f"unknown covariance mode tag {mode_tag}")

    rank = cov_ndim[mode_tag]
    width = _cov_width(rank, feature_dim)
    per_class = _COUNT.size + 8 * (feature_dim + width)
    pooled_bytes = 8 * feature_dim * feature_dim if has_pooled[mode_tag] else 0
    expected = _HEADER.size + num_classes * per_class + pooled_bytes
    if len(data) != expected:
        raise SnapshotError(f"snapshot has {len(data)} bytes, expected {expected}")

    counts = np.zeros(num_classes, dtype=np.int64)
    means = np.zeros((num_classes, feature_dim))
    cov_shape = (num_classes,) + (feature_dim,) * rank
    covs = np.zeros(cov_shape) if rank else None
    offset = _HEADER.size
    for j in range(num_classes):
        (counts[j],) = _COUNT.unpack_from(data, offset)
        offset += _COUNT.size
        means[j] = np.frombuffer(data, dtype=_F64, count=feature_dim, offset=offset)
        offset += 8 * feature_dim
        if covs is not None:
            block = np.frombuffer(data, dtype=_F64, count=width, offset=offset)
            covs[j] = block.reshape((feature_dim,) * rank)
            offset += 8 * width
    pooled = None
    if pooled_bytes:
        flat = np.frombuffer(data, dtype=_F64, count=feature_dim * feature_dim, offset=offset)
        pooled = flat.reshape(feature_dim, feature_dim).copy()

    return SnapshotPayload(
        mode_tag=mode_tag,
        num_classes=num_classes,
        feature_dim=feature_dim,
        counts=counts,
        means=means,
        covs=covs,
        pooled_scatter=pooled,
    )
