"""Numerical toolkit for the regularized thick-spray system on the torus."""

__version__ = "0.1.0"
