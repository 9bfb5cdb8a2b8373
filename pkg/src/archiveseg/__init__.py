"""Segmentation from curated image archives without pixel labels."""

__version__ = "0.1.0"
