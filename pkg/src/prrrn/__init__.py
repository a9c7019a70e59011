"""Pairwise-regularized residual-recursive networks for non-rigid structure from motion."""

__version__ = "0.1.0"
