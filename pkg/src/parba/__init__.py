"""Robust parallel bundle adjustment by camera-sub-block consensus."""

__version__ = "0.1.0"
