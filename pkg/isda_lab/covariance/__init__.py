"""Streaming class-conditional covariance estimation."""

from isda_lab.covariance.snapshot import FORMAT_VERSION, MAGIC
from isda_lab.covariance.tracker import ClassStats, CovarianceTracker, CovMode

__all__ = ["FORMAT_VERSION", "MAGIC", "ClassStats", "CovMode", "CovarianceTracker"]
