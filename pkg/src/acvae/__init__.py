"""Attention-based convolutional VAE for anomaly detection in multivariate industrial telemetry."""

__version__ = "0.1.0"
