"""Differentially private diffusion training with a staged noise schedule."""

__version__ = "0.1.0"
