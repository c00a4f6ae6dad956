"""Synthetic clusters, binary image records and semi-supervised splits."""

from isda_lab.data.dataset import Dataset, Normalization, concatenate
from isda_lab.data.records import (
    export_binary_records,
    load_binary_records,
    pad_crop_flip,
    record_size,
)
from isda_lab.data.splits import SemiSplit, split_semi
from isda_lab.data.synthetic import anisotropic_covariances, generate_synthetic, simplex_means

__all__ = [
    "Dataset",
    "Normalization",
    "SemiSplit",
    "anisotropic_covariances",
    "concatenate",
    "export_binary_records",
    "generate_synthetic",
    "load_binary_records",
    "pad_crop_flip",
    "record_size",
    "simplex_means",
    "split_semi",
]
