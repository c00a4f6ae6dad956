"""Immutable in-memory dataset handle and per-channel normalization."""

from dataclasses import dataclass, field

import numpy as np

from isda_lab.errors import DatasetError
from isda_lab.guardrails import as_float_array, require_labels


@dataclass(frozen=True)
class Normalization:
    """
    Per-channel mean/std. Inputs are flat channel-planar rows: channel k occupies the
    contiguous slice of length ``size // channels`` starting at ``k * size // channels``.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, inputs: np.ndarray, channels: int) -> "Normalization":
        per_channel = inputs.reshape(inputs.shape[0], channels, -1)
        mean = per_channel.mean(axis=(0, 2))
        std = per_channel.std(axis=(0, 2))
        return cls(mean, np.where(std > 0, std, 1.0))

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    def apply(self, inputs: np.ndarray) -> np.ndarray:
        n = inputs.shape[0]
        per_channel = inputs.reshape(n, self.channels, -1)
        out = (per_channel - self.mean[None, :, None]) / self.std[None, :, None]
        return out.reshape(n, -1)


@dataclass(frozen=True)
class Dataset:
    """
    Inputs as flat float64 rows plus labels (None for unlabeled data).

    ``image_shape`` is (channels, height, width) for image records. Synthetic sets keep
    their generating ``true_means``/``true_covs`` for comparison against tracked
    statistics.
    """

    inputs: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    image_shape: tuple[int, int, int] | None = None
    normalization: Normalization | None = None
    true_means: np.ndarray | None = field(default=None, repr=False)
    true_covs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        inputs = as_float_array(self.inputs, "inputs", ndim=2).copy()
        inputs.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.labels is not None:
            labels = require_labels(self.labels, self.num_classes)
            if labels.shape[0] != inputs.shape[0]:
                raise DatasetError(f"{inputs.shape[0]} inputs but {labels.shape[0]} labels")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)
        if self.image_shape is not None:
            shape = tuple(int(s) for s in self.image_shape)
            if int(np.prod(shape)) != inputs.shape[1]:
                raise DatasetError(f"image shape {shape} does not match width {inputs.shape[1]}")
            object.__setattr__(self, "image_shape", shape)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def subset(self, indices: np.ndarray, *, keep_labels: bool = True) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[idx],
            self.labels[idx] if keep_labels and self.labels is not None else None,
            self.num_classes,
            self.image_shape,
            self.normalization,
            self.true_means,
            self.true_covs,
        )

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise DatasetError("unlabeled dataset has no class counts")
        return np.bincount(self.labels, minlength=self.num_classes)


def concatenate(first: Dataset, second: Dataset) -> Dataset:
    """Rows of ``first`` followed by rows of ``second``; both must be labeled alike."""
    if first.num_classes != second.num_classes or first.input_dim != second.input_dim:
        raise DatasetError("cannot concatenate datasets of different shape")
    if first.is_labeled != second.is_labeled:
        raise DatasetError("cannot concatenate labeled and unlabeled datasets")
    labels = None
    if first.labels is not None and second.labels is not None:
        labels = np.concatenate([first.labels, second.labels])
    return Dataset(
        np.concatenate([first.inputs, second.inputs]),
        labels,
        first.num_classes,
        first.image_shape,
        first.normalization,
        first.true_means,
        first.true_covs,
    )
