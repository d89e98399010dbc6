"""Nested multi-scale anti-spoofing back-end with local attention, open-set API tracing and scoring tools."""

__version__ = "0.1.0"
