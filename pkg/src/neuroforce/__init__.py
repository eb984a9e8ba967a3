"""Finger-force decoding from motor-unit spike trains on an emulated neuromorphic substrate."""

__version__ = "0.1.0"
