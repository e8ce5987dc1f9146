"""Harmonic heat flow of almost complex structures on 4-tori."""

__version__ = "0.1.0"
