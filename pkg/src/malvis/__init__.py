"""Malware visualization classification toolkit."""

__version__ = "0.1.0"
