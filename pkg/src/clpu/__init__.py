"""Continual learning with exact private forgetting on a small numpy MLP."""

__version__ = "0.1.0"
