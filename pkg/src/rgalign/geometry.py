"""Axis-aligned boxes in normalized center-size form."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Box", "center_to_corners", "corners_to_center"]


@dataclass(frozen=True)
class Box:
    """(cx, cy, w, h) as fractions of the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def validate(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        return self

    def corners(self):
        """(x0, y0, x1, y1), clipped to [0, 1]."""
        x0 = max(self.cx - self.w / 2.0, 0.0)
        y0 = max(self.cy - self.h / 2.0, 0.0)
        x1 = min(self.cx + self.w / 2.0, 1.0)
        y1 = min(self.cy + self.h / 2.0, 1.0)
        return (x0, y0, x1, y1)

    def as_array(self):
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def center_to_corners(boxes):
    """(..., 4) center-size -> (..., 4) corner form. Plain array math."""
    boxes = np.asarray(boxes)
    half = boxes[..., 2:] / 2.0
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_center(boxes):
    boxes = np.asarray(boxes)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2.0, wh], axis=-1)
