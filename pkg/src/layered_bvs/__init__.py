"""Layered Bayesian variable selection for shell-wise imaging phenotypes."""

__version__ = "0.1.0"
