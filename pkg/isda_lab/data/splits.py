"""Class-balanced labeled / unlabeled / validation partitions."""

from dataclasses import dataclass

import numpy as np
from loguru import logger

from isda_lab.data.dataset import Dataset, concatenate
from isda_lab.errors import DatasetError
from isda_lab.numeric import Rng

DEFAULT_VALIDATION_FRACTION = 0.25


@dataclass(frozen=True)
class SemiSplit:
    """Disjoint partition of a dataset; ``unlabeled`` has its labels stripped."""

    labeled: Dataset
    unlabeled: Dataset
    validation: Dataset
    labeled_indices: np.ndarray
    unlabeled_indices: np.ndarray
    validation_indices: np.ndarray

    def merged_labeled(self) -> Dataset:
        """Training labels plus the held-out validation samples."""
        return concatenate(self.labeled, self.validation)


def _balanced_counts(total: int, num_classes: int) -> np.ndarray:
    counts = np.full(num_classes, total // num_classes)
    counts[: total % num_classes] += 1
    return counts


def split_semi(
    dataset: Dataset,
    num_labeled: int,
    seed: int,
    *,
    validation_fraction: float = DEFAULT_VALIDATION_FRACTION,
) -> SemiSplit:
    """
    Draw ``num_labeled`` samples with per-class counts differing by at most one, hold
    ``validation_fraction`` of them out for validation (also class-balanced), and strip
    labels from the rest.

    Raises:
        DatasetError: num_labeled < C, num_labeled > len(dataset), or a class has too
            few samples for its share.
    """
    if dataset.labels is None:
        raise DatasetError("cannot split an unlabeled dataset")
    n, C = len(dataset), dataset.num_classes
    if num_labeled > n:
        raise DatasetError(f"num_labeled={num_labeled} exceeds dataset size {n}")
    if num_labeled < C:
        raise DatasetError(f"num_labeled={num_labeled} cannot cover {C} classes")
    if not 0.0 <= validation_fraction < 1.0:
        raise DatasetError(f"validation_fraction must lie in [0, 1), got {validation_fraction}")

    rng = Rng(seed)
    by_class = [rng.split(c).permutation(np.flatnonzero(dataset.labels == c)) for c in range(C)]
    if num_labeled == n:
        take = np.array([idx.size for idx in by_class])
    else:
        take = _balanced_counts(num_labeled, C)
        short = [c for c in range(C) if by_class[c].size < take[c]]
        if short:
            raise DatasetError(f"class {short[0]} has too few samples for a balanced split")

    val_take = np.floor(take * validation_fraction).astype(np.int64)
    deficit = int(round(validation_fraction * int(take.sum()))) - int(val_take.sum())
    if deficit > 0:
        order = np.argsort(-(take * validation_fraction - val_take), kind="stable")
        val_take[order[:deficit]] += 1

    labeled, validation, unlabeled = [], [], []
    for c in range(C):
        chosen = by_class[c][: take[c]]
        validation.append(chosen[: val_take[c]])
        labeled.append(chosen[val_take[c] :])
        unlabeled.append(by_class[c][take[c] :])

    labeled_idx = np.sort(np.concatenate(labeled))
    validation_idx = np.sort(np.concatenate(validation))
    unlabeled_idx = np.sort(np.concatenate(unlabeled))
    logger.info(
        "Split {} samples: {} labeled, {} validation, {} unlabeled",
        n,
        labeled_idx.size,
        validation_idx.size,
        unlabeled_idx.size,
    )
    return SemiSplit(
        labeled=dataset.subset(labeled_idx),
        unlabeled=dataset.subset(unlabeled_idx, keep_labels=False),
        validation=dataset.subset(validation_idx),
        labeled_indices=labeled_idx,
        unlabeled_indices=unlabeled_idx,
        validation_indices=validation_idx,
    )
