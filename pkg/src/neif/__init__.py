"""Recover shape, reflectance and lights from images taken under unknown lighting."""

__version__ = "0.1.0"
