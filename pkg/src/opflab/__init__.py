"""Desk-scale laboratory for learning AC optimal power flow solutions."""

__version__ = "0.1.0"
