"""isda-lab - Implicit semantic data augmentation at desk scale."""

__version__ = "0.1.0"
