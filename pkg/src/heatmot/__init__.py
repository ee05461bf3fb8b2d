"""Center-heatmap multiple-object tracking reference engine."""

from .grid import FeaturePyramid, GridGeometry, OutputMaps
from .metrics import FrameAnnotations, MOTMetrics, evaluate, iou
from .tracker import Detection, Track, Tracker, TrackerConfig

__all__ = [
    "Detection",
    "FeaturePyramid",
    "FrameAnnotations",
    "GridGeometry",
    "MOTMetrics",
    "OutputMaps",
    "Track",
    "Tracker",
    "TrackerConfig",
    "evaluate",
    "iou",
]

__version__ = "0.1.0"
