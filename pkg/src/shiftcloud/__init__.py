"""Lateral-shift point cloud augmentation for end-to-end lane keeping."""

__version__ = "0.1.0"
