"""Feature-selecting classifier for small-sample, high-dimensional tabular data."""

__version__ = "0.1.0"
