"""Adversarial attacks on predictive uncertainty and their evaluation."""

__version__ = "0.1.0"
