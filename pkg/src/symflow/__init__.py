"""Symmetry-aware normalizing flows for sampling unnormalized Boltzmann densities."""

__version__ = "0.1.0"
