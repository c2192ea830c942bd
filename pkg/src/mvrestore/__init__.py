"""Colour restoration of underwater images from multiple posed views with depth."""

__version__ = "0.1.0"
