"""Weak-2D-box to 3D-box autolabeling with a multimodal transformer."""

__version__ = "0.1.0"
