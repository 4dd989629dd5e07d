"""Controlled diffusions: rate bundles, HJB solves, couplings and turnpike checks."""

__version__ = "0.1.0"
