"""Numerical functional Ito calculus on cadlag grid paths."""
__version__ = "0.1.0"
