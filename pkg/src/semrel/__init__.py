"""Interaction-based query/item relevance scoring at desk scale."""

__version__ = "0.1.0"
