"""Desk-scale federated learning simulator for divergence-weighted aggregation."""

__version__ = "0.1.0"
