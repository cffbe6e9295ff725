"""Two-factor commodity futures model with a yield-curve functional regression term."""

__version__ = "0.1.0"
