"""Mixture normalization and friends, on numpy."""

__version__ = "0.1.0"
