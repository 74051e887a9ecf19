"""Spectral-Galerkin toolkit for the 2D Navier-Stokes equation with linear multiplicative
Stratonovich noise: pathwise transform, derivative propagation, anticipating initial data."""

__version__ = "0.1.0"
