"""Axis-aligned boxes in normalized center/size form, plus IoU geometry."""

from __future__ import annotations

import warnings
from dataclasses import dataclass


@dataclass(frozen=True)
class Box:
    """A box as (center_x, center_y, width, height), all normalized to [0, 1].

    Centers must lie in the unit square and sides must be positive; the box
    clipped to the unit square has to stay non-empty.
    """

    c_x: float
    c_y: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.c_x <= 1.0 and 0.0 <= self.c_y <= 1.0):
            raise ValueError(f"box center ({self.c_x}, {self.c_y}) outside unit square")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box sides ({self.w}, {self.h}) must lie in (0, 1]")
        x0, y0, x1, y1 = self.corners()
        if min(x1, 1.0) <= max(x0, 0.0) or min(y1, 1.0) <= max(y0, 0.0):
            raise ValueError("box clipped to the unit square is empty")

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        return (
            self.c_x - self.w / 2.0,
            self.c_y - self.h / 2.0,
            self.c_x + self.w / 2.0,
            self.c_y + self.h / 2.0,
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.c_x, self.c_y, self.w, self.h)


def iou_corners(a: tuple[float, float, float, float],
                b: tuple[float, float, float, float]) -> float:
    """IoU of two boxes given in (x0, y0, x1, y1) corner form."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = max(0.0, ax1 - ax0) * max(0.0, ay1 - ay0)
    area_b = max(0.0, bx1 - bx0) * max(0.0, by1 - by0)
    if area_a <= 0.0 or area_b <= 0.0:
        warnings.warn("IoU of a degenerate zero-area box is 0")
        return 0.0
    ix = min(ax1, bx1) - max(ax0, bx0)
    iy = min(ay1, by1) - max(ay0, by0)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two center-form boxes."""
    return iou_corners(a.corners(), b.corners())
