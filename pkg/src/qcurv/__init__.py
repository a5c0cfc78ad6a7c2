"""Numerical laboratory for the prescribed Q-curvature equation with negative total curvature."""

__version__ = "0.1.0"
