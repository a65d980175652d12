"""Numerical detection of bifurcation-value candidates and fiber trivialization flows."""

__version__ = "0.1.0"
