"""Split-and-merge table structure recognition."""

__version__ = "0.1.0"
