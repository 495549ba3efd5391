"""Monotonic chunkwise attention trained in sync with CTC spike timings."""

__version__ = "0.1.0"
