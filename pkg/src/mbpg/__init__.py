"""Momentum-based variance-reduced policy gradient methods with an exact tabular oracle."""

__version__ = "0.1.0"
