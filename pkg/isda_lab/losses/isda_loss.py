"""Supervised implicit-augmentation surrogate loss with analytic gradients.

For a feature a with label y, augmented features are a~ ~ N(a, lambda * Sigma_y). The
expected cross-entropy over a~ is bounded above by cross-entropy on adjusted logits

    z_j = w_j^T a + b_j + (lambda / 2) * v_jy^T Sigma_y v_jy,    v_jy = w_j - w_y

which is what ``surrogate_loss`` evaluates. Covariances are constants: gradients flow
to W (through both the linear and the quadratic term), b and the features only.
"""

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from isda_lab.covariance import CovarianceTracker, CovMode
from isda_lab.errors import DomainError, NumericError
from isda_lab.guardrails import (
    as_float_array,
    require_finite,
    require_labels,
    require_non_negative,
    require_shape,
)
from isda_lab.numeric import Rng, logsumexp_rows, softmax_rows


class LambdaSchedule(str, Enum):
    """How augmentation strength evolves over training."""

    LINEAR = "linear"
    CONSTANT = "constant"


@dataclass(frozen=True)
class AugmentationConfig:
    """
    Augmentation strength and covariance view.

    ``t`` and ``T`` share a unit chosen by the caller; the trainer counts iterations,
    so ``T`` is epochs x batches per epoch.
    """

    lambda0: float = 0.5
    schedule: LambdaSchedule = LambdaSchedule.LINEAR
    cov_mode: CovMode = CovMode.FULL
    t: int = 0
    T: int = 1

    def __post_init__(self) -> None:
        require_non_negative(self.lambda0, "lambda0")
        object.__setattr__(self, "schedule", LambdaSchedule(self.schedule))
        object.__setattr__(self, "cov_mode", CovMode(self.cov_mode))
        if self.T < 1:
            raise DomainError(f"T must be >= 1, got {self.T}")
        if not 0 <= self.t <= self.T:
            raise DomainError(f"t must lie in [0, T={self.T}], got {self.t}")

    def at(self, t: int) -> "AugmentationConfig":
        """Same config at iteration ``t`` (clamped to T)."""
        return replace(self, t=min(max(int(t), 0), self.T))


def lambda_at(config: AugmentationConfig) -> float:
    """(t / T) * lambda0 for the linear ramp, lambda0 when constant."""
    if config.schedule is LambdaSchedule.CONSTANT:
        return float(config.lambda0)
    return config.t / config.T * config.lambda0


@dataclass(frozen=True)
class ClassifierHead:
    """Final linear layer: logits = a @ W.T + b with W of shape (C, A)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        W = as_float_array(self.W, "W", ndim=2)
        b = as_float_array(self.b, "b", ndim=1)
        require_shape(b, (W.shape[0],), "b")
        require_finite(W, "W")
        require_finite(b, "b")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.W.T + self.b

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "ClassifierHead":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    @classmethod
    def initialize(cls, num_classes: int, feature_dim: int, rng: Rng) -> "ClassifierHead":
        """Uniform(-1/sqrt(A), 1/sqrt(A)) weights, zero biases."""
        bound = 1.0 / np.sqrt(feature_dim)
        W = rng.uniform(-bound, bound, (num_classes, feature_dim))
        return cls(W, np.zeros(num_classes))


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        features = as_float_array(self.features, "features", ndim=2)
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise DomainError(
                f"labels shape {labels.shape} does not match {features.shape[0]} feature rows"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class LossReport:
    """
    Mean loss over a batch and its gradients.

    ``grad_features`` is the gradient of the mean loss, so row i already carries the
    1/B factor.
    """

    loss: float
    grad_W: np.ndarray
    grad_b: np.ndarray
    grad_features: np.ndarray
    per_sample: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def scaled(self, weight: float) -> "LossReport":
        return LossReport(
            self.loss * weight,
            self.grad_W * weight,
            self.grad_b * weight,
            self.grad_features * weight,
            self.per_sample * weight,
        )


def _check_inputs(
    features: np.ndarray, labels: object, head: ClassifierHead
) -> tuple[np.ndarray, np.ndarray]:
    X = as_float_array(features, "features", ndim=2)
    require_shape(X, (None, head.feature_dim), "features")
    if X.shape[0] == 0:
        raise DomainError("loss of an empty batch")
    require_finite(X, "features")
    y = require_labels(labels, head.num_classes)
    if y.shape[0] != X.shape[0]:
        raise DomainError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    return X, y


def check_tracker_matches(head: ClassifierHead, tracker: CovarianceTracker) -> None:
    if (tracker.num_classes, tracker.feature_dim) != (head.num_classes, head.feature_dim):
        raise DomainError(
            f"tracker is {tracker.num_classes}x{tracker.feature_dim} but head is "
            f"{head.num_classes}x{head.feature_dim}"
        )


def apply_covariances(W: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """
    Per-sample Sigma_i w_j for every class row: (B, C, A).

    ``covs`` is a (B, A, A) stack or a (B, A) stack of diagonals; diagonals cost O(A)
    per class instead of O(A^2).
    """
    if covs.ndim == 2:
        return W[None, :, :] * covs[:, None, :]
    return np.einsum("bij,cj->bci", covs, W)


def check_covariance_stack(covs: object, batch: int, feature_dim: int) -> np.ndarray:
    arr = as_float_array(covs, "covs")
    if arr.ndim == 2:
        require_shape(arr, (batch, feature_dim), "covs")
    else:
        require_shape(arr, (batch, feature_dim, feature_dim), "covs")
    return arr


def raise_non_finite(values: np.ndarray, what: str) -> None:
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite {what}", index=int(bad[0]))


def quadratic_terms(
    W: np.ndarray, covs: np.ndarray, refs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """
    Sigma_g (w_j - w_r) and (w_j - w_r)^T Sigma_g (w_j - w_r) for each covariance g with
    reference class r = refs[g]: (G, C, A) and (G, C).

    ``covs`` is a (G, A, A) stack or a (G, A) stack of diagonals.
    """
    V = W[None, :, :] - W[refs][:, None, :]
    if covs.ndim == 2:
        shifted = V * covs[:, None, :]
    else:
        # Symmetric Sigma: rows of V @ Sigma are Sigma v_j.
        shifted = np.matmul(V, covs)
    return shifted, np.einsum("gca,gca->gc", V, shifted)


def _grouped_surrogate(
    X: np.ndarray,
    y: np.ndarray,
    head: ClassifierHead,
    covs: np.ndarray | None,
    refs: np.ndarray,
    group: np.ndarray,
    lam: float,
) -> LossReport:
    """Surrogate where sample i uses covariance ``covs[group[i]]`` with reference ``refs``."""
    W, B = head.W, X.shape[0]
    rows = np.arange(B)

    z = head.logits(X)
    shifted = None
    if lam != 0.0:
        S = check_covariance_stack(covs, refs.shape[0], head.feature_dim)
        shifted, quad = quadratic_terms(W, S, refs)
        z = z + 0.5 * lam * quad[group]

    losses = logsumexp_rows(z) - z[rows, y]
    raise_non_finite(losses, "surrogate loss")

    P = softmax_rows(z)
    R = P.copy()
    R[rows, y] -= 1.0
    grad_b = R.mean(axis=0)
    grad_W = R.T @ X / B
    if shifted is not None:
        P_group = np.zeros((refs.shape[0], head.num_classes))
        np.add.at(P_group, group, P)
        weighted = P_group[:, :, None] * shifted
        grad_W += lam * weighted.sum(axis=0) / B
        np.add.at(grad_W, refs, -lam * weighted.sum(axis=1) / B)
    grad_features = R @ W / B
    return LossReport(float(losses.mean()), grad_W, grad_b, grad_features, losses)


def surrogate_from_covariances(
    features: np.ndarray,
    labels: object,
    head: ClassifierHead,
    covs: np.ndarray | None,
    lam: float,
) -> LossReport:
    """
    Surrogate loss with explicitly supplied per-sample covariances.

    Args:
        features: (B, A) features.
        labels: (B,) class indices used as targets.
        head: Classifier head.
        covs: Per-sample covariance views, (B, A, A) or (B, A); ignored when lam == 0.
        lam: Augmentation strength.

    Returns:
        LossReport for the mean loss.
    """
    X, y = _check_inputs(features, labels, head)
    require_non_negative(lam, "lambda")
    return _grouped_surrogate(X, y, head, covs, y, np.arange(X.shape[0]), lam)


def adjusted_logits(
    a: object,
    y: int,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    cov_mode: CovMode | str | None = None,
) -> np.ndarray:
    """Logits of one sample with the (lambda/2) v^T Sigma_y v term added per class."""
    vec = as_float_array(a, "a", ndim=1)
    require_shape(vec, (head.feature_dim,), "a")
    check_tracker_matches(head, tracker)
    require_non_negative(lam, "lambda")
    z = head.logits(vec)
    if lam == 0.0:
        return z
    S = tracker.covariance_views([y], cov_mode)
    _, quad = quadratic_terms(head.W, S, np.array([int(y)]))
    return z + 0.5 * lam * quad[0]


def surrogate_loss(
    batch: LabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    config: AugmentationConfig,
) -> LossReport:
    """
    Mean surrogate loss of a labeled batch at the config's current lambda.

    Quadratic terms are formed once per class present in the batch, so the extra cost
    is O(C A^2) per class rather than per sample.
    """
    check_tracker_matches(head, tracker)
    X, y = _check_inputs(batch.features, batch.labels, head)
    lam = lambda_at(config)
    if lam == 0.0:
        return _grouped_surrogate(X, y, head, None, y, np.arange(X.shape[0]), 0.0)
    classes, group = np.unique(y, return_inverse=True)
    covs = tracker.covariance_views(classes, config.cov_mode)
    return _grouped_surrogate(X, y, head, covs, classes, group.reshape(-1), lam)


def cross_entropy_loss(batch: LabeledBatch, head: ClassifierHead) -> LossReport:
    """Plain softmax cross-entropy; the lambda = 0 surrogate."""
    return surrogate_from_covariances(batch.features, batch.labels, head, None, 0.0)
