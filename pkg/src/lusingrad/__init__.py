"""Constructive Lusin-type approximation of vector fields by gradients."""

__version__ = "0.1.0"
