"""Confidence estimation and failure prediction toolkit."""

__version__ = "0.1.0"
