"""Simulation and analysis of absorption images of a single trapped atom."""

__version__ = "0.1.0"
