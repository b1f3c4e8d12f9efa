"""Axis-aligned boxes, IoU, frame normalization and greedy NMS.

Boxes are continuous half-open rectangles ``[x_min, x_max) x [y_min, y_max)``
with area ``(x_max - x_min) * (y_max - y_min)``.  The scalar helpers work on
:class:`BBox` values; the ``*_array`` variants work on ``(N, 4)`` float arrays
and are what the heavier modules use internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidArgumentError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidArgumentError(f"empty or inverted box {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple(), dtype=float)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def mirrored(self, image_width: float) -> "BBox":
        """The same box after flipping an image of ``image_width`` horizontally."""
        return BBox(image_width - self.x_max, self.y_min, image_width - self.x_min, self.y_max)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


# Normalized boxes live in a viewpoint frame rather than pixel space; the
# arithmetic is identical so the type is shared.
NormalizedBox = BBox


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    part_id: int

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidArgumentError(f"non-finite detection score {self.score}")
        if self.part_id < 0:
            raise InvalidArgumentError(f"negative part id {self.part_id}")


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return inter / (a.area + b.area - inter)


def proposal_distance(a: NormalizedBox, b: NormalizedBox) -> float:
    """Kernel distance between two boxes in a common frame: ``1 - IoU``."""
    return 1.0 - iou(a, b)


def _check_size(size, name):
    w, h = size
    if not (w > 0 and h > 0):
        raise InvalidArgumentError(f"{name} must be positive, got {size}")
    return float(w), float(h)


def normalize_box(b: BBox, image_size, frame_size) -> NormalizedBox:
    """Rescale ``b`` from an image of ``image_size`` into a frame of ``frame_size``.

    Both sizes are ``(width, height)``.
    """
    w, h = _check_size(image_size, "image_size")
    fw, fh = _check_size(frame_size, "frame_size")
    sx, sy = fw / w, fh / h
    return BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)


def denormalize_box(b: NormalizedBox, image_size, frame_size) -> BBox:
    """Inverse of :func:`normalize_box`."""
    w, h = _check_size(image_size, "image_size")
    fw, fh = _check_size(frame_size, "frame_size")
    sx, sy = w / fw, h / fh
    return BBox(b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy)


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([b.as_tuple() for b in boxes], dtype=float)


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` box arrays -> ``(N, M)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_array(a)[:, None] + area_array(b)[None, :] - inter
    out = np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[same] = 1.0
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS on arrays; returns kept indices in keep order.

    Sorting is stable, so equal scores keep their input order.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise InvalidArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    if len(order) == 0:
        return keep
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        suppressed |= overlaps[idx] >= iou_threshold
    return keep


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    boxes = boxes_to_array([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=float)
    return [dets[i] for i in nms_indices(boxes, scores, iou_threshold)]


def clip_box(b: BBox, width: float, height: float) -> BBox | None:
    """Intersect ``b`` with the image rectangle; ``None`` if nothing is left."""
    x0, y0 = max(b.x_min, 0.0), max(b.y_min, 0.0)
    x1, y1 = min(b.x_max, float(width)), min(b.y_max, float(height))
    if x0 >= x1 or y0 >= y1:
        return None
    return BBox(x0, y0, x1, y1)


def contains_array(outer: np.ndarray, inner: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Mask of ``inner`` rows lying within ``outer``.

    A single outer box gives a ``(K,)`` mask, an ``(M, 4)`` stack an ``(M, K)`` one.
    """
    inner = np.asarray(inner, dtype=float).reshape(-1, 4)
    o = np.asarray(outer, dtype=float)
    single = o.ndim == 1
    o = o.reshape(-1, 4)[:, None, :]
    mask = (
        (inner[None, :, 0] >= o[..., 0] - tol)
        & (inner[None, :, 1] >= o[..., 1] - tol)
        & (inner[None, :, 2] <= o[..., 2] + tol)
        & (inner[None, :, 3] <= o[..., 3] + tol)
    )
    return mask[0] if single else mask
