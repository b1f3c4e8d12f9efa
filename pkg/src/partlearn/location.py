"""Kernel-density part location models over viewpoint-normalised boxes.

``L(w') = 1 / (N h) * sum_w K(D(w', w) / h)`` with the uniform kernel
``K(u) = 1/2 * 1(|u| <= 1)`` and ``D = 1 - IoU``.  For ``h = 0.5`` the score
is the fraction of training boxes overlapping ``w'`` at IoU >= 0.5.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, InvalidStateError
from .geometry import BBox, iou_matrix, nms_indices, normalize_box


@dataclass
class LocationModel:
    samples: np.ndarray  # (N, 4) boxes in the viewpoint frame
    bandwidth: float = 0.5
    frame_size: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).reshape(-1, 4)
        if not 0 < self.bandwidth <= 1:
            raise InvalidArgumentError(f"bandwidth must be in (0, 1], got {self.bandwidth}")
        if not (self.frame_size[0] > 0 and self.frame_size[1] > 0):
            raise InvalidArgumentError(f"frame size must be positive, got {self.frame_size}")

    @property
    def is_empty(self) -> bool:
        return len(self.samples) == 0

    def __len__(self):
        return len(self.samples)

    def normalize(self, boxes: np.ndarray, image_size) -> np.ndarray:
        w, h = image_size
        if not (w > 0 and h > 0):
            raise InvalidArgumentError(f"image size must be positive, got {image_size}")
        scale = np.array([self.frame_size[0] / w, self.frame_size[1] / h] * 2)
        return np.asarray(boxes, dtype=float).reshape(-1, 4) * scale

    def score_normalized(self, boxes: np.ndarray) -> np.ndarray:
        if self.is_empty:
            raise InvalidStateError("location model has no samples")
        d = 1.0 - iou_matrix(boxes, self.samples)
        inside = np.abs(d / self.bandwidth) <= 1.0
        return 0.5 * inside.sum(axis=1) / (len(self.samples) * self.bandwidth)

    def scores(self, boxes: np.ndarray, image_size) -> np.ndarray:
        """Density at each of ``boxes`` (pixel coordinates of an image of ``image_size``)."""
        return self.score_normalized(self.normalize(boxes, image_size))

    def with_samples(self, extra: np.ndarray) -> "LocationModel":
        return LocationModel(np.concatenate([self.samples, np.asarray(extra, float).reshape(-1, 4)]),
                             self.bandwidth, self.frame_size)


def empty_location_model(bandwidth: float = 0.5, frame_size=(1.0, 1.0)) -> LocationModel:
    return LocationModel(np.zeros((0, 4)), bandwidth, frame_size)


def build_location_model(dets, h: float = 0.5, frame_size=(1.0, 1.0)) -> LocationModel:
    """Model from ``(BBox, image_size)`` pairs, each normalised into ``frame_size``."""
    if len(dets) == 0:
        raise InvalidArgumentError("a location model needs at least one detection")
    samples = [normalize_box(b, size, frame_size).as_tuple() for b, size in dets]
    return LocationModel(np.array(samples, dtype=float), h, tuple(float(v) for v in frame_size))


def location_score(m: LocationModel, w_prime: BBox, image_size) -> float:
    return float(m.scores(w_prime.as_array()[None], image_size)[0])


@dataclass(frozen=True)
class HarvestConfig:
    max_per_image: int = 3
    min_confidence: float = 0.5
    nms_iou: float = 0.3


def harvest_location_training_samples(part_probs_per_image, boxes_per_image, sizes,
                                      cfg: HarvestConfig = HarvestConfig()):
    """Top part detections per object image, used as location training samples.

    Args:
        part_probs_per_image: per image, the ``(K,)`` probabilities of the part.
        boxes_per_image: per image, the ``(K, 4)`` proposal boxes.
        sizes: per image, ``(width, height)``.

    Returns:
        ``(BBox, image_size)`` pairs, up to ``cfg.max_per_image`` per image.
    """
    out = []
    for probs, boxes, size in zip(part_probs_per_image, boxes_per_image, sizes):
        if len(boxes) == 0:
            continue
        keep = nms_indices(boxes, probs, cfg.nms_iou)
        taken = 0
        for k in keep:
            if taken >= cfg.max_per_image or probs[k] < cfg.min_confidence:
                break
            out.append((BBox.from_array(boxes[k]), tuple(size)))
            taken += 1
    return out


def density_map(m: LocationModel, box_size, step: float = 1.0) -> np.ndarray:
    """Density of a fixed-size box slid over the frame; rows follow y, columns x."""
    bw, bh = box_size
    fw, fh = m.frame_size
    xs = np.arange(0.0, max(fw - bw, 0.0) + 1e-9, step)
    ys = np.arange(0.0, max(fh - bh, 0.0) + 1e-9, step)
    gx, gy = np.meshgrid(xs, ys)
    boxes = np.stack([gx.ravel(), gy.ravel(), gx.ravel() + bw, gy.ravel() + bh], 1)
    return m.score_normalized(boxes).reshape(len(ys), len(xs))


def export_density_pgm(m: LocationModel, box_size, path, step: float = 1.0):
    """Write :func:`density_map` as an 8-bit PGM scaled so that the peak is white."""
    from .raster import save_mask

    dm = density_map(m, box_size, step)
    peak = dm.max()
    img = np.zeros_like(dm) if peak <= 0 else dm / peak
    save_mask(np.round(img * 255).astype(np.uint8), path)
    return dm
