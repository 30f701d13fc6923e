"""Plan, price and verify sample/spatial-parallel CNN training."""

__version__ = "0.1.0"
