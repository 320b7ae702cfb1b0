"""Axis-aligned box arithmetic shared by every other module.

Boxes use the half-open pixel convention [x0, x1) x [y0, y1): a box covers
the lattice pixels whose integer coordinates satisfy x0 <= x < x1 and
y0 <= y < y1. Coordinates are real-valued (regression outputs are
continuous); two boxes that merely touch along an edge have intersection
zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned rectangle with top-left (x0, y0) and exclusive bottom-right (x1, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"box coordinate {name}={v!r} is not finite")
            if v < 0:
                raise ValueError(f"box coordinate {name}={v!r} is negative")
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(
                f"box must have strictly positive extent, got "
                f"({self.x0}, {self.y0}, {self.x1}, {self.y1})"
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def to_list(self) -> list[float]:
        """Serialize as [x0, y0, x1, y1] in reading order (the JSON wire form)."""
        return [float(self.x0), float(self.y0), float(self.x1), float(self.y1)]

    @classmethod
    def from_list(cls, coords) -> "BoundingBox":
        if len(coords) != 4:
            raise ValueError(f"expected 4 coordinates, got {len(coords)}")
        return cls(float(coords[0]), float(coords[1]), float(coords[2]), float(coords[3]))


def area(b: BoundingBox) -> float:
    """Pixel area (x1 - x0) * (y1 - y0); strictly positive for any valid box."""
    return b.width * b.height


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    """Overlap area of two boxes under the half-open convention; 0 when disjoint."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union in [0, 1]; symmetric, 0 for disjoint boxes."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = area(a) + area(b) - inter
    return inter / union
