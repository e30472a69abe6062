"""Deformable-object digital twins, demonstration synthesis, and learned
graph world models."""

__version__ = "0.1.0"
