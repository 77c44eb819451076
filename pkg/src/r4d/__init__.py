"""Reference-based long-range distance estimation on synthetic driving scenes."""

__version__ = "0.1.0"
