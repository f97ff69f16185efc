"""Semantic-aware recurrent global-local navigation agent on a synthetic graph world."""

__version__ = "0.1.0"
