"""Explicit augmentation and Monte-Carlo oracles for the surrogate bounds."""

from isda_lab.oracle.monte_carlo import (
    McEstimate,
    RunningMoments,
    explicit_loss,
    explicit_loss_with_grad,
    mc_expected_ce,
    mc_expected_kl,
    sample_augmented,
)

__all__ = [
    "McEstimate",
    "RunningMoments",
    "explicit_loss",
    "explicit_loss_with_grad",
    "mc_expected_ce",
    "mc_expected_kl",
    "sample_augmented",
]
