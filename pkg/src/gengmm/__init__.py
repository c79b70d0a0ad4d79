"""Gaussian-mixture guided domain adaptation on synthetic segmentation scenes."""

__version__ = "0.1.0"
