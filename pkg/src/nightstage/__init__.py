"""Sequence-to-sequence sleep staging with single-night personalization."""

__version__ = "0.1.0"
