"""Toy-scale faithful latent-diffusion virtual try-on with synthetic oracles."""

__version__ = "0.1.0"
