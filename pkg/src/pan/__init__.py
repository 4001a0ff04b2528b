"""Pairwise attribute-informed similarity over precomputed features."""

__version__ = "0.1.0"
