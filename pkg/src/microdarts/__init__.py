"""Desk-scale differentiable architecture search with node normalization and
decorrelation discretization."""

__version__ = "0.1.0"
