"""Numerical lab for major-minor stochastic mean field games."""

__version__ = "0.1.0"
