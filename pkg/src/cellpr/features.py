"""Hand-crafted per-box features and per-image discriminative difference vectors.

The explicit discriminative vector for an ordered class pair (i, k) is
``[mean_intensity(i) - mean_intensity(k), mean_size(i) - mean_size(k)]`` where
each mean runs over the boxes of that class in one image. The ordering
[intensity, size] is fixed so serialized mixtures stay comparable across runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import BoundingBox, DegenerateBoxError
from .imaging import GrayImage

INTENSITY, SIZE = 0, 1
INTENSITY_FD_STEP = 0.5


class MissingClassError(LookupError):
    """A class needed for a discriminative vector has no boxes in the image."""


@dataclass(frozen=True)
class DiscriminativeVector:
    pair: tuple[int, int]
    values: np.ndarray

    def __post_init__(self):
        i, k = self.pair
        if i == k:
            raise ValueError(f"pair must name two distinct classes, got {self.pair}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("discriminative vector has non-finite entries")


def size_feature(box: BoundingBox) -> float:
    return (box.w_r - box.w_l) * (box.h_r - box.h_l)


def size_feature_grad(box: BoundingBox) -> np.ndarray:
    """d size / d [w_l, h_l, w_r, h_r]."""
    w, h = box.w_r - box.w_l, box.h_r - box.h_l
    return np.array([-h, -w, h, w])


def _pixel_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    a = max(math.ceil(lo), 0)
    b = min(math.floor(hi), n - 1)
    return a, b


def _coords_intensity(pixels: np.ndarray, coords) -> float:
    w_l, h_l, w_r, h_r = coords
    c0, c1 = _pixel_span(w_l, w_r, pixels.shape[1])
    r0, r1 = _pixel_span(h_l, h_r, pixels.shape[0])
    if c1 < c0 or r1 < r0:
        raise DegenerateBoxError(f"box {tuple(coords)} covers no pixels")
    return float(pixels[r0:r1 + 1, c0:c1 + 1].mean())


def covers_pixels(image: GrayImage, box: BoundingBox) -> bool:
    c0, c1 = _pixel_span(box.w_l, box.w_r, image.width)
    r0, r1 = _pixel_span(box.h_l, box.h_r, image.height)
    return c1 >= c0 and r1 >= r0


def intensity_feature(image: GrayImage, box: BoundingBox) -> float:
    """Mean intensity over integer pixels in [ceil(w_l), floor(w_r)] x [ceil(h_l), floor(h_r)]."""
    return _coords_intensity(image.pixels, (box.w_l, box.h_l, box.w_r, box.h_r))


def intensity_feature_grad(image: GrayImage, box: BoundingBox, step: float = INTENSITY_FD_STEP) -> np.ndarray:
    """Central finite difference of the intensity feature w.r.t. each box coordinate.

    A perturbation that leaves the box without pixels contributes a zero component.
    """
    base = box.as_array()
    grad = np.zeros(4)
    for j in range(4):
        up, dn = base.copy(), base.copy()
        up[j] += step
        dn[j] -= step
        try:
            grad[j] = (_coords_intensity(image.pixels, up) - _coords_intensity(image.pixels, dn)) / (2 * step)
        except DegenerateBoxError:
            grad[j] = 0.0
    return grad


def class_average(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise MissingClassError("no boxes for this class")
    return math.fsum(values) / len(values)


def discriminative_diff(avg_i: float, avg_k: float) -> float:
    return avg_i - avg_k


def box_features(image: GrayImage, boxes: Sequence[BoundingBox]) -> np.ndarray:
    """(n, 2) array of [intensity, size] per box."""
    out = np.empty((len(boxes), 2))
    for n, b in enumerate(boxes):
        out[n, INTENSITY] = intensity_feature(image, b)
        out[n, SIZE] = size_feature(b)
    return out


def explicit_vector(image: GrayImage, boxes_by_class: Sequence[Sequence[BoundingBox]],
                    pair: tuple[int, int]) -> DiscriminativeVector:
    i, k = pair
    bi, bk = boxes_by_class[i], boxes_by_class[k]
    if not bi or not bk:
        missing = i if not bi else k
        raise MissingClassError(f"class {missing} has no boxes")
    fi = box_features(image, bi)
    fk = box_features(image, bk)
    values = np.array([
        discriminative_diff(class_average(fi[:, INTENSITY]), class_average(fk[:, INTENSITY])),
        discriminative_diff(class_average(fi[:, SIZE]), class_average(fk[:, SIZE])),
    ])
    return DiscriminativeVector((i, k), values)


def explicit_vector_grad(image: GrayImage, boxes_by_class: Sequence[Sequence[BoundingBox]],
                         pair: tuple[int, int]) -> dict[int, np.ndarray]:
    """Jacobian of the explicit vector w.r.t. box coordinates.

    Returns ``{class_id: array (n_boxes, 2, 4)}`` for the two classes of the pair;
    entry [b, f, j] is d vector[f] / d coordinate j of box b.
    """
    i, k = pair
    bi, bk = boxes_by_class[i], boxes_by_class[k]
    if not bi or not bk:
        missing = i if not bi else k
        raise MissingClassError(f"class {missing} has no boxes")
    out = {}
    for cls, boxes, sign in ((i, bi, 1.0), (k, bk, -1.0)):
        jac = np.zeros((len(boxes), 2, 4))
        scale = sign / len(boxes)
        for n, b in enumerate(boxes):
            jac[n, INTENSITY] = scale * intensity_feature_grad(image, b)
            jac[n, SIZE] = scale * size_feature_grad(b)
        out[cls] = jac
    return out


def class_pairs(n_classes: int) -> list[tuple[int, int]]:
    return [(i, k) for i in range(n_classes - 1) for k in range(i + 1, n_classes)]
