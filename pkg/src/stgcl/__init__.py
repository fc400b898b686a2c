"""Spatio-temporal graph forecasting with auxiliary contrastive learning."""

__version__ = "0.1.0"
