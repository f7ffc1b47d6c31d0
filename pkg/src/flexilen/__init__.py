"""Desk-scale laboratory for observation-length-robust trajectory prediction."""

__version__ = "0.1.0"
