"""Masked latent transformer with random masking ratio, desk-scale."""

__version__ = "0.1.0"
