"""Desk-scale diffusion sandbox for self-attention K/V image prompting."""

__version__ = "0.1.0"
