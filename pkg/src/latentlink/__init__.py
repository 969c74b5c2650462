"""Latent world models for vision-based control over a scheduled wireless uplink."""

__version__ = "0.1.0"
