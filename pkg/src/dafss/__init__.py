"""Decoupled-experts few-shot point cloud segmentation on synthetic scenes."""

__version__ = "0.1.0"
