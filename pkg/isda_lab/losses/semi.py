"""Semi-supervised consistency surrogate and the combined labeled + unlabeled objective.

Unlabeled features are augmented with the covariance of their pseudo label (arg-max of
the model's own, detached, prediction). The expected KL divergence between the clean
and augmented predictions differs from an expected soft-target cross-entropy only by
the entropy of the clean prediction, which has no gradient, so the cross-entropy form
is what gets bounded and minimized.
"""

from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, Protocol

import numpy as np

from isda_lab.covariance import CovarianceTracker, CovMode
from isda_lab.errors import DomainError
from isda_lab.guardrails import (
    as_float_array,
    require_finite,
    require_non_negative,
    require_probability_rows,
    require_shape,
)
from isda_lab.losses.isda_loss import (
    AugmentationConfig,
    ClassifierHead,
    LabeledBatch,
    LossReport,
    apply_covariances,
    check_covariance_stack,
    check_tracker_matches,
    lambda_at,
    raise_non_finite,
    surrogate_loss,
)
from isda_lab.numeric import Rng, logsumexp_rows, softmax_rows

ForwardFn = Callable[[np.ndarray], tuple[np.ndarray, Any]]


@dataclass(frozen=True)
class UnlabeledBatch:
    """Features with detached soft predictions; ``probs`` never receive gradients."""

    features: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        features = as_float_array(self.features, "features", ndim=2)
        probs = require_probability_rows(as_float_array(self.probs, "probs", ndim=2))
        if probs.shape[0] != features.shape[0]:
            raise DomainError(f"{features.shape[0]} feature rows but {probs.shape[0]} prob rows")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "probs", probs.copy())

    @classmethod
    def from_head(cls, features: np.ndarray, head: ClassifierHead) -> "UnlabeledBatch":
        return cls(features, softmax_rows(head.logits(features)))

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class SemiWeights:
    """Weights of the consistency term (eta1) and the extra regularizer (eta2)."""

    eta1: float = 1.0
    eta2: float = 0.0

    def __post_init__(self) -> None:
        require_non_negative(self.eta1, "eta1")
        require_non_negative(self.eta2, "eta2")


def pseudo_labels(probs: object) -> np.ndarray:
    """Arg-max class per row; ties go to the smallest index."""
    P = require_probability_rows(as_float_array(probs, "probs", ndim=2))
    return np.argmax(P, axis=1).astype(np.int64)


def confidence_mask(probs: np.ndarray, threshold: float | None) -> np.ndarray:
    """1.0 where max prob >= threshold; all ones when no threshold is set."""
    if threshold is None:
        return np.ones(probs.shape[0])
    return (probs.max(axis=1) >= threshold).astype(np.float64)


def consistency_from_covariances(
    features: np.ndarray,
    probs: np.ndarray,
    head: ClassifierHead,
    covs: np.ndarray | None,
    lam: float,
    sample_weights: np.ndarray | None = None,
) -> LossReport:
    """
    Soft-target surrogate with explicit per-sample covariances.

    For sample i and each target class k the logits are shifted by
    (lambda/2) (w_j - w_k)^T Sigma_i (w_j - w_k); the loss is the p_ik-weighted sum of
    the resulting cross-entropies, averaged over the batch.
    """
    X = as_float_array(features, "features", ndim=2)
    require_shape(X, (None, head.feature_dim), "features")
    if X.shape[0] == 0:
        raise DomainError("loss of an empty batch")
    require_finite(X, "features")
    P_soft = as_float_array(probs, "probs", ndim=2)
    require_shape(P_soft, (X.shape[0], head.num_classes), "probs")
    require_non_negative(lam, "lambda")
    W, B, C = head.W, X.shape[0], head.num_classes
    weights = np.ones(B) if sample_weights is None else np.asarray(sample_weights, float)

    base = head.logits(X)
    if lam == 0.0:
        logp = base - logsumexp_rows(base)[:, None]
        losses = -(P_soft * logp).sum(axis=1) * weights
        raise_non_finite(losses, "consistency loss")
        P = softmax_rows(base)
        R = (P * P_soft.sum(axis=1)[:, None] - P_soft) * weights[:, None]
        grad_W = R.T @ X / B
    else:
        S = check_covariance_stack(covs, B, head.feature_dim)
        U = apply_covariances(W, S)
        # shifted[b, k, j] = Sigma_b (w_j - w_k)
        shifted = U[:, None, :, :] - U[:, :, None, :]
        V = W[None, :, :] - W[:, None, :]
        Z = base[:, None, :] + 0.5 * lam * np.einsum("kja,bkja->bkj", V, shifted)
        lse = logsumexp_rows(Z)
        target = np.diagonal(Z, axis1=1, axis2=2)
        losses = -(P_soft * (target - lse)).sum(axis=1) * weights
        raise_non_finite(losses, "consistency loss")
        P = softmax_rows(Z)
        R_full = (P_soft * weights[:, None])[:, :, None] * (P - np.eye(C)[None, :, :])
        T = R_full[..., None] * shifted
        R = R_full.sum(axis=1)
        grad_W = R.T @ X / B + lam * (T.sum(axis=(0, 1)) - T.sum(axis=(0, 2))) / B

    grad_b = R.mean(axis=0)
    grad_features = R @ W / B
    return LossReport(float(losses.mean()), grad_W, grad_b, grad_features, losses)


def consistency_surrogate(
    batch: UnlabeledBatch,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    lam: float,
    cov_mode: CovMode | str | None = None,
    confidence_threshold: float | None = None,
) -> LossReport:
    """
    Upper bound of the expected soft-target cross-entropy under augmentation with the
    pseudo-label covariance. The tracker should hold labeled-data statistics only.
    """
    check_tracker_matches(head, tracker)
    covs = None
    if lam != 0.0:
        covs = tracker.covariance_views(pseudo_labels(batch.probs), cov_mode)
    weights = None
    if confidence_threshold is not None:
        weights = confidence_mask(batch.probs, confidence_threshold)
    return consistency_from_covariances(batch.features, batch.probs, head, covs, lam, weights)


@dataclass(frozen=True)
class RegularizerResult:
    """
    Loss and gradients of an unlabeled-data regularizer.

    ``branch_grads`` pairs each forward cache with the gradient of the loss w.r.t. the
    features that forward produced, so the caller can backpropagate into the extractor.
    """

    loss: float
    grad_W: np.ndarray
    grad_b: np.ndarray
    branch_grads: tuple[tuple[Any, np.ndarray], ...] = ()

    def scaled(self, weight: float) -> "RegularizerResult":
        return RegularizerResult(
            self.loss * weight,
            self.grad_W * weight,
            self.grad_b * weight,
            tuple((cache, grad * weight) for cache, grad in self.branch_grads),
        )


class Regularizer(Protocol):
    def __call__(
        self, forward: ForwardFn, inputs: np.ndarray, head: ClassifierHead, rng: Rng
    ) -> RegularizerResult: ...


def _softmax_backward(P: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return P * (grad_p - np.sum(grad_p * P, axis=1, keepdims=True))


@dataclass(frozen=True)
class PiModelRegularizer:
    """Mean squared distance between predictions under two Gaussian input-noise draws."""

    noise_std: float = 0.15

    def __call__(
        self, forward: ForwardFn, inputs: np.ndarray, head: ClassifierHead, rng: Rng
    ) -> RegularizerResult:
        X = as_float_array(inputs, "inputs", ndim=2)
        B = X.shape[0]
        f1, cache1 = forward(X + self.noise_std * rng.standard_normal(X.shape))
        f2, cache2 = forward(X + self.noise_std * rng.standard_normal(X.shape))
        P1 = softmax_rows(head.logits(f1))
        P2 = softmax_rows(head.logits(f2))
        diff = P1 - P2
        loss = float(np.sum(diff * diff) / B)

        gz1 = _softmax_backward(P1, 2.0 * diff / B)
        gz2 = _softmax_backward(P2, -2.0 * diff / B)
        return RegularizerResult(
            loss,
            gz1.T @ f1 + gz2.T @ f2,
            gz1.sum(axis=0) + gz2.sum(axis=0),
            ((cache1, gz1 @ head.W), (cache2, gz2 @ head.W)),
        )


@dataclass(frozen=True)
class CombinedReport:
    """Total objective with per-term reports; feature gradients are already weighted."""

    loss: float
    grad_W: np.ndarray
    grad_b: np.ndarray
    grad_labeled_features: np.ndarray | None
    grad_unlabeled_features: np.ndarray | None
    supervised: LossReport | None
    consistency: LossReport | None
    regularization: RegularizerResult | None


def combined_loss(
    labeled: LabeledBatch | None,
    unlabeled: UnlabeledBatch | None,
    head: ClassifierHead,
    tracker: CovarianceTracker,
    config: AugmentationConfig,
    weights: SemiWeights,
    reg: Regularizer | None = None,
    *,
    forward: ForwardFn | None = None,
    unlabeled_inputs: np.ndarray | None = None,
    rng: Rng | None = None,
    confidence_threshold: float | None = None,
) -> CombinedReport:
    """
    Supervised surrogate + eta1 * consistency surrogate + eta2 * regularizer.

    Terms with zero weight (or missing batches) are skipped entirely. The regularizer
    needs ``forward``, the raw ``unlabeled_inputs`` and an ``rng``.
    """
    if not isinstance(weights, SemiWeights):
        raise DomainError("weights must be SemiWeights")
    require_non_negative(weights.eta1, "eta1")
    require_non_negative(weights.eta2, "eta2")
    grad_W = np.zeros_like(head.W)
    grad_b = np.zeros_like(head.b)
    total = 0.0

    supervised = None
    if labeled is not None:
        supervised = surrogate_loss(labeled, head, tracker, config)
        total += supervised.loss
        grad_W = grad_W + supervised.grad_W
        grad_b = grad_b + supervised.grad_b

    consistency = None
    if unlabeled is not None and len(unlabeled) and weights.eta1 > 0:
        raw = consistency_surrogate(
            unlabeled,
            head,
            tracker,
            lambda_at(config),
            config.cov_mode,
            confidence_threshold,
        )
        consistency = raw.scaled(weights.eta1)
        total += consistency.loss
        grad_W = grad_W + consistency.grad_W
        grad_b = grad_b + consistency.grad_b

    regularization = None
    if reg is not None and weights.eta2 > 0 and unlabeled_inputs is not None:
        if forward is None or rng is None:
            raise DomainError("regularizer needs a forward function and an rng")
        if len(unlabeled_inputs):
            regularization = reg(forward, unlabeled_inputs, head, rng).scaled(weights.eta2)
            total += regularization.loss
            grad_W = grad_W + regularization.grad_W
            grad_b = grad_b + regularization.grad_b

    return CombinedReport(
        loss=total,
        grad_W=grad_W,
        grad_b=grad_b,
        grad_labeled_features=supervised.grad_features if supervised else None,
        grad_unlabeled_features=consistency.grad_features if consistency else None,
        supervised=supervised,
        consistency=consistency,
        regularization=regularization,
    )
