"""Handwriting synthesis: a character-conditioned glyph GAN trained with a
matching-aware discriminator, glyph geometry measurement, and a penalty
controller that composes words against a learned spacing/angle profile."""

__version__ = "0.1.0"
