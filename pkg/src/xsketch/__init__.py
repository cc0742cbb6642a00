"""Expressive piano performance rendering with a planning/structure latent split."""

__version__ = "0.1.0"
