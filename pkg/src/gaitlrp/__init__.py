"""Explainable age-group classification of gait ground reaction forces."""

__version__ = "0.1.0"
