"""Automated multi-object video annotation engine."""

from .geometry import BBox, BinaryMask, Polygon
from .backends import Detection, DetectionNoise, PropagationDegradation, SyntheticWorldConfig
from .config import PipelineConfig

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BinaryMask",
    "Polygon",
    "Detection",
    "DetectionNoise",
    "PropagationDegradation",
    "SyntheticWorldConfig",
    "PipelineConfig",
    "__version__",
]
