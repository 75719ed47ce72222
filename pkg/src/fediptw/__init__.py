"""Federated individual treatment effect estimation with two-level
inverse-probability weighting."""

__version__ = "0.1.0"
