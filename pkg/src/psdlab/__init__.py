"""Synthetic granulometry: sphere packings, rendered views and PSD regression."""

__version__ = "0.1.0"
