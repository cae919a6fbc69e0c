"""Axis-aligned box geometry and the detection/annotation record types."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

Array = np.ndarray


class Modality(Enum):
    RGB = "rgb"
    TIR = "tir"


@dataclass
class Box:
    """Center/size box in pixel units."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"box sides must be non-negative, got {self.w}x{self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    @staticmethod
    def from_corners(x1: float, y1: float, x2: float, y2: float) -> "Box":
        return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)


@dataclass
class GroundTruth:
    box: Box
    class_id: int
    modality: Modality
    polygon: tuple[float, ...] | None = None  # 8 oriented-corner coords

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        if self.polygon is not None and len(self.polygon) != 8:
            raise ValueError("polygon must carry exactly 8 coordinates")


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0,1], got {self.score}")


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0.0 else 0.0


def iou_matrix(boxes_a: list[Box], boxes_b: list[Box]) -> Array:
    """Pairwise IoU table, [len(a), len(b)]."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([b.corners() for b in boxes_a])
    b = np.array([b.corners() for b in boxes_b])
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def envelope_from_polygon(polygon) -> Box:
    """Axis-aligned envelope of 8 oriented-corner coordinates."""
    xs = np.asarray(polygon[0::2], dtype=np.float64)
    ys = np.asarray(polygon[1::2], dtype=np.float64)
    return Box.from_corners(float(xs.min()), float(ys.min()),
                            float(xs.max()), float(ys.max()))
