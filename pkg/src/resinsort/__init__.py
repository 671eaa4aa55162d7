"""Metric-learning toolkit for sorting plastic waste images by resin code,
with novelty detection for unseen categories."""

__version__ = "0.1.0"
