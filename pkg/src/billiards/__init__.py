"""Specular billiards in periodic cylinders over analytic non-convex cross sections."""

__version__ = "0.1.0"
