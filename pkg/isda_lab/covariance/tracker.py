"""Streaming per-class feature statistics.

Batch-local covariances use the population convention (divide by m). Under that
convention the merge

    mu    <- (n mu + m mu') / (n + m)
    Sigma <- (n Sigma + m Sigma') / (n + m) + n m (mu - mu')(mu - mu')^T / (n + m)^2
    n     <- n + m

is an exact pooling identity: any partition of the data into mini-batches, in any
order, ends at the one-shot population statistics. With an m - 1 divisor it is not.
"""

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from loguru import logger

from isda_lab.covariance.snapshot import pack_snapshot, unpack_snapshot
from isda_lab.errors import DomainError, SnapshotError
from isda_lab.guardrails import as_float_array, require_finite, require_labels, require_shape


class CovMode(str, Enum):
    """Covariance used for augmentation."""

    FULL = "full"
    DIAGONAL = "diagonal"
    IDENTITY = "identity"
    SHARED = "shared"


_MODE_TAGS: dict[CovMode, int] = {
    CovMode.FULL: 0,
    CovMode.DIAGONAL: 1,
    CovMode.IDENTITY: 2,
    CovMode.SHARED: 3,
}
_TAG_MODES = {tag: mode for mode, tag in _MODE_TAGS.items()}
# Stored per-class covariance rank for each tracking mode.
_COV_NDIM = {CovMode.FULL: 2, CovMode.DIAGONAL: 1, CovMode.IDENTITY: 0, CovMode.SHARED: 0}
_KEEPS_POOLED = {
    CovMode.FULL: True,
    CovMode.DIAGONAL: False,
    CovMode.IDENTITY: False,
    CovMode.SHARED: True,
}
# Views each tracking mode can serve.
_SERVES: dict[CovMode, frozenset[CovMode]] = {
    CovMode.FULL: frozenset(CovMode),
    CovMode.DIAGONAL: frozenset({CovMode.DIAGONAL, CovMode.IDENTITY}),
    CovMode.IDENTITY: frozenset({CovMode.IDENTITY}),
    CovMode.SHARED: frozenset({CovMode.SHARED, CovMode.IDENTITY}),
}


@dataclass(frozen=True)
class ClassStats:
    """Copy of one class's running statistics; ``cov`` is (A, A), (A,) or empty."""

    class_id: int
    count: int
    mean: np.ndarray
    cov: np.ndarray


class CovarianceTracker:
    """
    Per-class running count, mean and covariance updated from mini-batches of features.

    Storage follows the mode: Full keeps C x A x A matrices, Diagonal keeps C x A
    variances, Shared keeps one pooled within-class scatter plus per-class means,
    Identity keeps only counts and means. Full trackers also keep the pooled scatter
    and can serve every view.

    A view the tracker does not store is refused with DomainError rather than
    approximated: a Diagonal tracker has no off-diagonal terms to build a Full view
    from, and a Shared tracker has no per-class scatter. Requests for a servable view
    fail only on an out-of-range class id.

    Single writer: do not call ``update`` while another thread reads views.
    """

    def __init__(self, num_classes: int, feature_dim: int, mode: CovMode | str = CovMode.FULL):
        if int(num_classes) < 2:
            raise DomainError(f"num_classes must be >= 2, got {num_classes}")
        if int(feature_dim) < 1:
            raise DomainError(f"feature_dim must be >= 1, got {feature_dim}")
        self._num_classes = int(num_classes)
        self._feature_dim = int(feature_dim)
        self._mode = CovMode(mode)

        C, A = self._num_classes, self._feature_dim
        self._counts = np.zeros(C, dtype=np.int64)
        self._means = np.zeros((C, A))
        rank = _COV_NDIM[self._mode]
        self._covs: np.ndarray | None = np.zeros((C,) + (A,) * rank) if rank else None
        self._pooled_scatter: np.ndarray | None = (
            np.zeros((A, A)) if _KEEPS_POOLED[self._mode] else None
        )

    @property
    def num_classes(self) -> int:
        return self._num_classes

    @property
    def feature_dim(self) -> int:
        return self._feature_dim

    @property
    def mode(self) -> CovMode:
        return self._mode

    @property
    def counts(self) -> np.ndarray:
        return self._counts.copy()

    @property
    def total_count(self) -> int:
        return int(self._counts.sum())

    def _check_class(self, class_id: int) -> int:
        j = int(class_id)
        if not 0 <= j < self._num_classes:
            raise DomainError(f"class id {class_id} out of range [0, {self._num_classes})")
        return j

    def stats(self, class_id: int) -> ClassStats:
        j = self._check_class(class_id)
        cov = self._covs[j].copy() if self._covs is not None else np.zeros(0)
        return ClassStats(j, int(self._counts[j]), self._means[j].copy(), cov)

    def update(self, features: object, labels: object) -> None:
        """
        Merge a mini-batch into the running statistics.

        Classes absent from the batch are untouched. Inputs are validated before any
        state changes, so a rejected batch leaves the tracker as it was.

        Raises:
            DomainError: Wrong shape, empty batch or out-of-range label.
            NumericError: Non-finite feature values.
        """
        X = as_float_array(features, "features", ndim=2)
        require_shape(X, (None, self._feature_dim), "features")
        if X.shape[0] < 1:
            raise DomainError("cannot update tracker from an empty batch")
        y = require_labels(labels, self._num_classes)
        if y.shape[0] != X.shape[0]:
            raise DomainError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
        require_finite(X, "features")

        for j in np.unique(y):
            Xj = X[y == j]
            m = Xj.shape[0]
            n = int(self._counts[j])
            total = n + m
            batch_mean = Xj.mean(axis=0)
            centered = Xj - batch_mean
            delta = self._means[j] - batch_mean
            cross = n * m / total

            scatter = centered.T @ centered if self._pooled_scatter is not None else None
            if self._mode is CovMode.FULL:
                merged = (n * self._covs[j] + scatter) / total
                merged += (cross / total) * np.outer(delta, delta)
                self._covs[j] = 0.5 * (merged + merged.T)
            elif self._mode is CovMode.DIAGONAL:
                batch_var = np.mean(centered * centered, axis=0)
                self._covs[j] = (n * self._covs[j] + m * batch_var) / total
                self._covs[j] += (cross / total) * delta * delta

            if self._pooled_scatter is not None:
                self._pooled_scatter += scatter + cross * np.outer(delta, delta)

            self._means[j] = (n * self._means[j] + m * batch_mean) / total
            self._counts[j] = total

        if self._pooled_scatter is not None:
            self._pooled_scatter = 0.5 * (self._pooled_scatter + self._pooled_scatter.T)

    def pooled_covariance(self) -> np.ndarray:
        """Population covariance of all features about their own class means."""
        if self._pooled_scatter is None:
            raise DomainError(f"{self._mode.value} tracker does not keep a pooled covariance")
        total = self.total_count
        if total == 0:
            return np.zeros((self._feature_dim, self._feature_dim))
        return self._pooled_scatter / total

    def _resolve_mode(self, mode: CovMode | str | None) -> CovMode:
        view = self._mode if mode is None else CovMode(mode)
        if view not in _SERVES[self._mode]:
            raise DomainError(f"{self._mode.value} tracker cannot serve a {view.value} view")
        return view

    def covariance_view(self, class_id: int, mode: CovMode | str | None = None) -> np.ndarray:
        """
        Covariance for ``class_id`` as an (A, A) matrix (Full, Shared) or a length-A
        diagonal (Diagonal, Identity). Returned arrays are copies.

        Raises:
            DomainError: ``class_id`` is out of range, or ``mode`` names a view this
                tracker cannot serve (see ``_SERVES``).
        """
        j = self._check_class(class_id)
        view = self._resolve_mode(mode)
        if view is CovMode.IDENTITY:
            return np.ones(self._feature_dim)
        if view is CovMode.SHARED:
            return self.pooled_covariance()
        if view is CovMode.DIAGONAL:
            cov = self._covs[j]
            return np.diag(cov).copy() if cov.ndim == 2 else cov.copy()
        return self._covs[j].copy()

    def covariance(self, class_id: int, mode: CovMode | str | None = None) -> np.ndarray:
        """Covariance for ``class_id`` as an (A, A) matrix under the requested view."""
        view = self.covariance_view(class_id, mode)
        return np.diag(view) if view.ndim == 1 else view

    def covariance_views(self, labels: object, mode: CovMode | str | None = None) -> np.ndarray:
        """
        Per-sample covariance views for a label vector: (B, A, A) or (B, A).

        The result is detached from tracker state.
        """
        y = require_labels(labels, self._num_classes)
        view = self._resolve_mode(mode)
        A = self._feature_dim
        if view is CovMode.IDENTITY:
            return np.ones((y.shape[0], A))
        if view is CovMode.SHARED:
            return np.broadcast_to(self.pooled_covariance(), (y.shape[0], A, A)).copy()
        if view is CovMode.DIAGONAL and self._covs.ndim == 3:
            return np.diagonal(self._covs, axis1=1, axis2=2)[y].copy()
        return self._covs[y].copy()

    def copy(self) -> "CovarianceTracker":
        return CovarianceTracker.from_bytes(self.to_bytes())

    def to_bytes(self) -> bytes:
        return pack_snapshot(
            _MODE_TAGS[self._mode], self._counts, self._means, self._covs, self._pooled_scatter
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "CovarianceTracker":
        payload = unpack_snapshot(
            data,
            cov_ndim={tag: _COV_NDIM[mode] for tag, mode in _TAG_MODES.items()},
            has_pooled={tag: _KEEPS_POOLED[mode] for tag, mode in _TAG_MODES.items()},
        )
        if payload.num_classes < 2 or payload.feature_dim < 1:
            raise SnapshotError("snapshot dimensions are invalid")
        tracker = cls(payload.num_classes, payload.feature_dim, _TAG_MODES[payload.mode_tag])
        tracker._counts = payload.counts
        tracker._means = payload.means
        tracker._covs = payload.covs
        tracker._pooled_scatter = payload.pooled_scatter
        return tracker

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        logger.debug("Wrote tracker snapshot {}", path)
        return path

    @classmethod
    def load(cls, path: Path) -> "CovarianceTracker":
        return cls.from_bytes(Path(path).read_bytes())
