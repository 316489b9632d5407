"""Desk-scale lab for progressive-subnetwork training on small residual nets."""

__version__ = "0.1.0"
