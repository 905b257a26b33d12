"""Hybrid-prediction integrated planning on synthetic driving scenarios."""

__version__ = "0.1.0"
