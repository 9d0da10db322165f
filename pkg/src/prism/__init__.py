"""Intensity-only full-field receiver simulation."""

__version__ = "0.1.0"
