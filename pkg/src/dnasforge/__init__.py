"""Differentiable architecture search with hardware-cost objectives, on numpy."""

__version__ = "0.1.0"
