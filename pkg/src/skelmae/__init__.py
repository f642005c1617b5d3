"""Spatial-temporal masked autoencoding for skeleton action recognition."""

__version__ = "0.1.0"
