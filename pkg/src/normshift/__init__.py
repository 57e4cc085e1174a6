"""Normalization layers for domain shift, from scratch on numpy."""

__version__ = "0.1.0"
