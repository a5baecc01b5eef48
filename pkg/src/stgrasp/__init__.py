"""Grasp planning for transparent and specular objects by distilling a depth scorer into an RGB network."""

__version__ = "0.1.0"
