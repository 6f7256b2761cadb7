"""Bi-manual fingerspelling recognition and iterative re-annotation, desk scale."""

__version__ = "0.1.0"
