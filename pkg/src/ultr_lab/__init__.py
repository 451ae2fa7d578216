"""Experimentation toolkit for two-tower click models under logging-policy confounding."""

__version__ = "0.1.0"
