"""Generative modeling of images as canonical JPEG byte streams."""

__version__ = "0.1.0"
