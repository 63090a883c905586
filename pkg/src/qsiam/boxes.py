"""Axis-aligned boxes in center form."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError


@dataclass(frozen=True)
class BBox:
    """Box with center (cx, cy) and size (w, h), in pixels.

    Coordinates are continuous: pixel (i, j) covers [i, i+1) x [j, j+1), so a
    top-left ``x, y, w, h`` box has center ``(x + w/2, y + h/2)``.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ParameterError(f"box size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h
