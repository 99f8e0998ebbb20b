"""Credit scoring from raw card-transaction event streams."""

__version__ = "0.1.0"
