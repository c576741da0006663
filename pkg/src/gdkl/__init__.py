"""Gaussian processes with deep, RBF and infinite-width network kernels, and guided deep kernel learning."""
__version__ = "0.1.0"
