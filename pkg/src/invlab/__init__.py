"""Invariance lab: synthetic worlds, contrastive training and invariance metrics."""

__version__ = "0.1.0"
