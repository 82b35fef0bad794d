"""Latent geometry world model on a toy frozen-encoder world, trained with flow matching."""

__version__ = "0.1.0"
