"""Lightweight transport-mode detection with global-pooling 1-D CNNs."""

__version__ = "0.1.0"
