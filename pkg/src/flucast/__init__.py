"""Multi-country influenza forecasting toolkit."""

__version__ = "0.1.0"
