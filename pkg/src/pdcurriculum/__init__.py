"""Severity-ordered curriculum training of multi-task 3D CNNs for disease classification."""

__version__ = "0.1.0"
