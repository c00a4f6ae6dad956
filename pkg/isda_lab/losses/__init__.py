"""Closed-form surrogate losses for supervised and semi-supervised training."""

from isda_lab.losses.isda_loss import (
    AugmentationConfig,
    ClassifierHead,
    LabeledBatch,
    LambdaSchedule,
    LossReport,
    adjusted_logits,
    cross_entropy_loss,
    lambda_at,
    surrogate_from_covariances,
    surrogate_loss,
)
from isda_lab.losses.semi import (
    CombinedReport,
    PiModelRegularizer,
    Regularizer,
    RegularizerResult,
    SemiWeights,
    UnlabeledBatch,
    combined_loss,
    confidence_mask,
    consistency_from_covariances,
    consistency_surrogate,
    pseudo_labels,
)

__all__ = [
    "AugmentationConfig",
    "ClassifierHead",
    "CombinedReport",
    "LabeledBatch",
    "LambdaSchedule",
    "LossReport",
    "PiModelRegularizer",
    "Regularizer",
    "RegularizerResult",
    "SemiWeights",
    "UnlabeledBatch",
    "adjusted_logits",
    "combined_loss",
    "confidence_mask",
    "consistency_from_covariances",
    "consistency_surrogate",
    "cross_entropy_loss",
    "lambda_at",
    "pseudo_labels",
    "surrogate_from_covariances",
    "surrogate_loss",
]
