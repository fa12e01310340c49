"""Coarse-to-fine 3D fully convolutional segmentation at desk scale."""

__version__ = "0.1.0"
