"""Spatio-temporal ride-hailing demand forecasting with FCL-Net."""

__version__ = "0.1.0"
