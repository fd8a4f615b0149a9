"""Conditional normalizing-flow anomaly detection over CNN feature pyramids."""

__version__ = "0.1.0"
