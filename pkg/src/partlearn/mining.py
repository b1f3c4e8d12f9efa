"""Discovery of new part positives and background negatives inside object images."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .geometry import BBox, iou_matrix, nms_indices

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiningConfig:
    max_per_image: int = 1
    nms_iou: float = 0.3
    min_combined_score: float = 0.5
    negative_iou_max: float = 0.3
    negatives_per_part: int = 10
    appearance_weight: float = 0.5
    location_weight: float = 0.5

    def __post_init__(self):
        if self.max_per_image < 0 or self.negatives_per_part < 0:
            raise InvalidArgumentError("per-image limits must be non-negative")
        if self.appearance_weight < 0 or self.location_weight < 0:
            raise InvalidArgumentError("combination weights must be non-negative")
        if self.appearance_weight + self.location_weight <= 0:
            raise InvalidArgumentError("at least one combination weight must be positive")


def normalize_location(l) -> np.ndarray:
    """Min-max scale densities over one image's proposals; a flat vector maps to zeros."""
    l = np.asarray(l, dtype=float)
    if l.size == 0:
        return l
    lo, hi = l.min(), l.max()
    if hi <= lo:
        return np.zeros_like(l)
    return (l - lo) / (hi - lo)


def combine_scores(a, l, cfg: MiningConfig = MiningConfig(), normalized: bool = False) -> np.ndarray:
    """Weighted sum of appearance probability and (min-max normalised) location density.

    ``a`` and ``l`` hold the values of every proposal of one image.  Pass
    ``normalized=True`` when ``l`` is already scaled to [0, 1].
    """
    a = np.asarray(a, dtype=float)
    lhat = np.asarray(l, dtype=float) if normalized else normalize_location(l)
    if a.shape != lhat.shape:
        raise InvalidArgumentError("appearance and location scores must align")
    return cfg.appearance_weight * a + cfg.location_weight * lhat


@dataclass(frozen=True)
class MinedSample:
    image_id: str
    box: BBox
    part_id: int  # -1 for background
    score: float
    proposal_index: int


@dataclass
class MinedSet:
    positives: list = field(default_factory=list)
    negatives: list = field(default_factory=list)
    skipped_images: list = field(default_factory=list)

    def extend(self, other: "MinedSet") -> "MinedSet":
        return MinedSet(self.positives + other.positives, self.negatives + other.negatives,
                        self.skipped_images + other.skipped_images)

    def positives_for(self, part_id: int) -> list:
        return [s for s in self.positives if s.part_id == part_id]


@dataclass
class ImageProposals:
    """Proposals of one object image with their descriptors."""
    image_id: str
    boxes: np.ndarray  # (K, 4) in image coordinates
    features: np.ndarray  # (K, D)
    image_size: tuple
    viewpoint: str | None = None
    whole_features: np.ndarray | None = None  # descriptor of the entire image


def part_scores(probs: np.ndarray, part_id: int, boxes: np.ndarray, image_size, location_model,
                cfg: MiningConfig) -> np.ndarray:
    """Combined score of every proposal for one part; appearance alone without a usable model."""
    a = probs[:, part_id]
    if location_model is None or location_model.is_empty:
        return a
    return combine_scores(a, location_model.scores(boxes, image_size), cfg)


def mine_part_instances(appearance, location_models: dict, images, cfg: MiningConfig = MiningConfig(),
                        rng=None) -> MinedSet:
    """Mine up to ``max_per_image`` positives per part and background negatives per image.

    ``location_models`` maps ``(part_id, viewpoint)`` to a model; an empty
    model means "no location evidence" and mining falls back to appearance.
    An image whose viewpoint has no entry at all is skipped.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    P = appearance.part_count
    out = MinedSet()
    for im in images:
        if len(im.boxes) == 0:
            continue
        if any((i, im.viewpoint) not in location_models for i in range(P)):
            log.warning("no location model for viewpoint %r; skipping %s", im.viewpoint, im.image_id)
            out.skipped_images.append(im.image_id)
            continue
        probs = appearance.predict_proba(im.features)
        taken = []
        for i in range(P):
            s = part_scores(probs, i, im.boxes, im.image_size, location_models[(i, im.viewpoint)], cfg)
            keep = nms_indices(im.boxes, s, cfg.nms_iou)
            n = 0
            for k in keep:
                if n >= cfg.max_per_image or s[k] < cfg.min_combined_score:
                    break
                out.positives.append(MinedSample(im.image_id, BBox.from_array(im.boxes[k]), i, float(s[k]), int(k)))
                taken.append(k)
                n += 1
        if taken:
            ov = iou_matrix(im.boxes, im.boxes[taken]).max(axis=1)
            pool = np.flatnonzero(ov <= cfg.negative_iou_max)
        else:
            pool = np.arange(len(im.boxes))
        n_neg = min(len(pool), cfg.negatives_per_part * P)
        for k in np.sort(rng.choice(pool, size=n_neg, replace=False)) if n_neg else []:
            out.negatives.append(MinedSample(im.image_id, BBox.from_array(im.boxes[k]), -1, 0.0, int(k)))
    return out


CSV_HEADER = ["image_id", "kind", "part_id", "x_min", "y_min", "x_max", "y_max", "score"]


def write_mined_csv(mined: MinedSet, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for kind, items in (("positive", mined.positives), ("negative", mined.negatives)):
        for s in items:
            w.writerow([s.image_id, kind, s.part_id, *(f"{v:.6g}" for v in s.box.as_tuple()), f"{s.score:.6g}"])
