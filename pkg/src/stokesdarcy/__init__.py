"""Homogenized Stokes-Darcy coupling toolkit."""
__version__ = "0.1.0"
