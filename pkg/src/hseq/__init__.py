"""Hybrid serial/parallel sequence model with rectified-flow block generation."""

__version__ = "0.1.0"
