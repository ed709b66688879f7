"""Stackelberg congestion games solved through differentiable route-choice dynamics."""

__version__ = "0.1.0"
