"""Learned point cloud attribute codec with multi-generation robustness training."""

__version__ = "0.1.0"
