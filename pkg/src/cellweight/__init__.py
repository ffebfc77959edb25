"""Class-abundance-weighted cell detection from dot annotations."""

__version__ = "0.1.0"
