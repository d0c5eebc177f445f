"""Desk-scale association-guided 3D point-cloud detection pipeline."""

__version__ = "0.1.0"
