"""Uncertainty-aware self-supervised 3D data association toolkit."""

from .core import Box7, Detection, PointCloud, Sequence, TrackletLabel, TrackRow

__version__ = "0.1.0"

__all__ = [
    "Box7",
    "Detection",
    "PointCloud",
    "Sequence",
    "TrackletLabel",
    "TrackRow",
    "__version__",
]
