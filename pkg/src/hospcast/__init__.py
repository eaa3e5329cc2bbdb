"""Weekly county hospitalization forecasting with rolling-origin evaluation."""

__version__ = "0.1.0"
