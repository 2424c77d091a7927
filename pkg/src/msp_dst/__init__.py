"""Dialogue state tracking with a per-slot mentioned-slot-pool memory."""

__version__ = "0.1.0"
