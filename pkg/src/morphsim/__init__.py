"""Planar character simulation, motion imitation and design search."""

__version__ = "0.1.0"
