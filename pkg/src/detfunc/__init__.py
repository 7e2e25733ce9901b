"""Determining functionals for the stochastic 2D Navier-Stokes equations."""

__version__ = "0.1.0"
