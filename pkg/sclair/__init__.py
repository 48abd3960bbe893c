"""Supervised contrastive learning for IMU airwriting recognition."""

__version__ = "0.3.0"
