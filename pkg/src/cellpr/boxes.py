"""Axis-aligned boxes, detections and overlap."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DegenerateBoxError(ValueError):
    """Raised when a box covers no usable area or no pixels."""


@dataclass(frozen=True)
class BoundingBox:
    """Box in pixel coordinates, origin top-left. ``w`` is the column axis, ``h`` the row axis."""

    w_l: float
    h_l: float
    w_r: float
    h_r: float

    def __post_init__(self):
        coords = (self.w_l, self.h_l, self.w_r, self.h_r)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if self.w_l > self.w_r or self.h_l > self.h_r:
            raise ValueError(f"inverted box {coords}")

    @property
    def width(self) -> float:
        return self.w_r - self.w_l

    @property
    def height(self) -> float:
        return self.h_r - self.h_l

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.w_l + self.w_r), 0.5 * (self.h_l + self.h_r))

    def as_array(self) -> np.ndarray:
        return np.array([self.w_l, self.h_l, self.w_r, self.h_r], dtype=float)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    def clamp(self, width: float, height: float) -> "BoundingBox":
        w_l = min(max(self.w_l, 0.0), width)
        w_r = min(max(self.w_r, 0.0), width)
        h_l = min(max(self.h_l, 0.0), height)
        h_r = min(max(self.h_r, 0.0), height)
        return BoundingBox(w_l, h_l, w_r, h_r)

    def translate(self, dw: float, dh: float) -> "BoundingBox":
        return BoundingBox(self.w_l + dw, self.h_l + dh, self.w_r + dw, self.h_r + dh)

    def scale(self, sw: float, sh: float) -> "BoundingBox":
        return BoundingBox(self.w_l * sw, self.h_l * sh, self.w_r * sw, self.h_r * sh)

    def intersection(self, other: "BoundingBox") -> float:
        iw = min(self.w_r, other.w_r) - max(self.w_l, other.w_l)
        ih = min(self.h_r, other.h_r) - max(self.h_l, other.h_l)
        if iw <= 0 or ih <= 0:
            return 0.0
        return iw * ih


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    inter = a.intersection(b)
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (n, 4) and (m, 4) arrays of [w_l, h_l, w_r, h_r]."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return np.clip(out, 0.0, 1.0)
