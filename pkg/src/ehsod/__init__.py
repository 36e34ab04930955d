"""Hybrid-supervised two-stage object detection with CAM-guided proposals."""

__version__ = "0.1.0"
