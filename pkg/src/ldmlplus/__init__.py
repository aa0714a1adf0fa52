"""Logistic discriminant Mahalanobis metric learning with privileged information."""

__version__ = "0.1.0"
