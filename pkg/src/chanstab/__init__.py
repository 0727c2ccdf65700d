"""Boundary feedback stabilization of variable-density channel flow around Poiseuille."""

__version__ = "0.1.0"
