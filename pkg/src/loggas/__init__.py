"""Simulation and numerical-verification toolkit for the 2D Coulomb log gas."""

__version__ = "0.1.0"
