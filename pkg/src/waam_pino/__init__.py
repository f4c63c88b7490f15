"""Physics-informed operator surrogates for long-horizon WAAM distortion forecasting."""

__version__ = "0.1.0"
