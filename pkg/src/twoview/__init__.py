"""Differentiable two-view geometry estimation from putative correspondences."""

__version__ = "0.1.0"
