"""Estimation-control duality for hidden Markov models."""

__version__ = "0.1.0"
