"""Desk-scale laboratory for text-free inversion attacks on concept-erased diffusion models."""

__version__ = "0.1.0"
