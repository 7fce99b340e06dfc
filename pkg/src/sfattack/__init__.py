"""Spatial-frequency fusion adversarial attack lab for a toy object detector."""

__version__ = "0.1.0"
