"""Orthogonal tilings, geometric finite-volume Laplacians and their random walks."""

__version__ = "0.1.0"
