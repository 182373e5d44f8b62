"""Null-control synthesis for semilinear heat equations and cascade systems."""

__version__ = "0.1.0"
