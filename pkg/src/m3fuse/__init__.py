"""Desk-scale 3D point-cloud object detection with two-stage attention
fusion over multi-representation features, built on an in-package
reverse-mode tape so every stage is gradient-checkable."""

__version__ = "0.1.0"
