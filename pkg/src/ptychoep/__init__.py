"""Bayesian message-passing reconstruction for ptychography."""

__version__ = "0.1.0"
