"""Depth- and time-tracking of dendritic spines in two-photon image stacks."""

from .model import (
    BBox,
    Detection2D,
    EvalReport,
    ImageStack,
    SpineObject3D,
    TimeTrack,
    TrackingConfig,
    ValidationError,
    build_object,
    validate_dataset,
)

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "Detection2D",
    "EvalReport",
    "ImageStack",
    "SpineObject3D",
    "TimeTrack",
    "TrackingConfig",
    "ValidationError",
    "build_object",
    "validate_dataset",
]
