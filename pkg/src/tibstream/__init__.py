"""Streaming hybrid CTC/attention toolkit with dynamic chunking and Tibetan units."""

__version__ = "0.1.0"
