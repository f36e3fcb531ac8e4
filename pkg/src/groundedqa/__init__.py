"""Grounded multiple-choice visual QA engine with spatial attention."""

__version__ = "0.1.0"
