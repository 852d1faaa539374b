"""Discrete universal denoising when the channel is unknown."""

__version__ = "0.1.0"
