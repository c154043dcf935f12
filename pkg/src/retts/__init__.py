"""Decompose-and-edit text-based speech insertion at desk scale."""

__version__ = "0.1.0"
