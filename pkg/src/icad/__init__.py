"""One-class surface anomaly detection by image completion."""

__version__ = "0.1.0"
