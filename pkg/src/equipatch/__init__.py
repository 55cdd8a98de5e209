"""Rotation/reflection-equivariant patch embedding for compact ViTs."""

__version__ = "0.1.0"
