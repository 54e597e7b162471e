"""Conditional-diffusion non-autoregressive captioning at desk scale."""

__version__ = "0.1.0"
