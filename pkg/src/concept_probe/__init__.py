"""Concept-based explanations for convolutional symbolic-music classifiers."""

__version__ = "0.1.0"
