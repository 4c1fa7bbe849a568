"""Disentangled category-dependent / category-independent recommendation toolkit."""

__version__ = "0.1.0"
