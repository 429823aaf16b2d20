"""Desk-scale pixel-space diffusion toolkit."""

__version__ = "0.1.0"
