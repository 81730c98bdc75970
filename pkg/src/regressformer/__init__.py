"""Multitask sequence model that regresses by decoding digit tokens and
generates property-conditioned text from the same weights."""

__version__ = "0.1.0"
