"""Unsupervised mapping between medical coding systems via embedding alignment."""

__version__ = "0.1.0"
