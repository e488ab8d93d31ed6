"""Class-agnostic detection proposals for forward-looking sonar images."""

from .boxes import BoundingBox, iou, objectness_from_iou
from .exceptions import (
    AnnotationParseError,
    RejectedInputError,
    SamplingExhaustedError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotationParseError",
    "BoundingBox",
    "RejectedInputError",
    "SamplingExhaustedError",
    "TrainingDivergedError",
    "iou",
    "objectness_from_iou",
]
