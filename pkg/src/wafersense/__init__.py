"""Soft-sensing regression engine for wafer metrology forecasting."""

__version__ = "0.1.0"
