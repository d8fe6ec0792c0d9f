"""Auditor-driven projected updates for s-happy multicalibration."""

__version__ = "0.1.0"
