"""Crash deduplication by embedding stack traces and sanitizer reports and
clustering them with a hierarchy-guided epsilon search."""

__version__ = "0.1.0"
