"""Spectral estimation for weighted Laplace operators on the flat torus."""

__version__ = "0.1.0"
