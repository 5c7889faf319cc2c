"""Latent diffusion for styled handwritten word images."""

__version__ = "0.1.0"
