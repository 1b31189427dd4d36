"""Differentiable multiphysics simulation and first-order policy optimization."""

__version__ = "0.1.0"
