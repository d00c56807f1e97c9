"""Desk-scale toolkit for spatially controllable multi-effect video diffusion."""

__version__ = "0.1.0"
