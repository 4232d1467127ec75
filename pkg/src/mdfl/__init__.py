"""Multi-domain feature learning toolkit for conditional place recognition."""

__version__ = "0.1.0"
