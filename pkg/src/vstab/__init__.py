"""Reactive power demand from annual voltage screening and contingency dynamics."""

__version__ = "0.1.0"
