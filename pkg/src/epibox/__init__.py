"""Epipolar feature warping, cuboid decoding, and oriented 3D box evaluation."""

__version__ = "0.1.0"
