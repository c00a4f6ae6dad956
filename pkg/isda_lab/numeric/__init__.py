"""Dense linear algebra and randomness kernel."""

from isda_lab.numeric.core import (
    Rng,
    default_jitter,
    logsumexp,
    logsumexp_rows,
    psd_factor,
    sample_gaussian,
    sample_gaussian_rows,
    softmax_rows,
)

__all__ = [
    "Rng",
    "default_jitter",
    "logsumexp",
    "logsumexp_rows",
    "psd_factor",
    "sample_gaussian",
    "sample_gaussian_rows",
    "softmax_rows",
]
