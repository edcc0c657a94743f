"""Toy audio-adapter lab for a skeletal-dance diffusion transformer."""

__version__ = "0.1.0"
