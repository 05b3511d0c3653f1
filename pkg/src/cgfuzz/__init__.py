"""Optimization-aware fuzzing for a toy tensor-graph compiler."""

__version__ = "0.1.0"
