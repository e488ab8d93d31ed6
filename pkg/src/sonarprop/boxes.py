"""Axis-aligned boxes, IoU and the IoU-to-objectness mapping."""

from dataclasses import dataclass

import numpy as np

from .exceptions import RejectedInputError

EPSILON = 0.2


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel rectangle ``[x, x + w) x [y, y + h)``."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise RejectedInputError(f"degenerate box {self}")

    @property
    def area(self):
        return self.w * self.h

    def as_tuple(self):
        return (self.x, self.y, self.w, self.h)

    def inside(self, width, height):
        return self.x >= 0 and self.y >= 0 and self.x + self.w <= width and self.y + self.h <= height


def iou(a, b):
    """Intersection over union of two boxes."""
    for box in (a, b):
        if not (box.w > 0 and box.h > 0):
            raise RejectedInputError(f"degenerate box {box}")
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return float(inter / (a.area + b.area - inter))


def as_array(boxes):
    """``n x 4`` float64 array of ``(x, y, w, h)`` rows."""
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64).reshape(-1, 4)
    else:
        arr = np.array([b.as_tuple() for b in boxes], dtype=np.float64).reshape(-1, 4)
    if (arr[:, 2:] <= 0).any():
        raise RejectedInputError("degenerate box in array")
    return arr


def iou_matrix(a, b):
    """Pairwise IoU between two box collections, shape ``len(a) x len(b)``."""
    a, b = as_array(a), as_array(b)
    ix = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def objectness_from_iou(value, epsilon=EPSILON):
    """Map an IoU to a training target.

    IoU at or above ``1 - epsilon`` saturates to 1, IoU at or below
    ``epsilon`` drops to 0, anything between is kept as is.
    """
    if not 0.0 <= value <= 1.0:
        raise RejectedInputError(f"iou must lie in [0, 1], got {value}")
    if value >= 1.0 - epsilon:
        return 1.0
    if value <= epsilon:
        return 0.0
    return float(value)
