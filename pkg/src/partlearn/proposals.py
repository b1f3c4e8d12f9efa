"""Class-independent box proposals.

A single-scale graph-based over-segmentation followed by greedy hierarchical
merging of adjacent regions (colour, texture, size and fill similarities),
emitting the bounding box of every region the hierarchy creates.
"""
from __future__ import annotations

import csv
import heapq
from dataclasses import dataclass, field

import numpy as np
from skimage.segmentation import felzenszwalb

from .errors import InvalidArgumentError
from .geometry import BBox
from .raster import Raster

COLOR_BINS = 25
TEXTURE_BINS = 8


@dataclass(frozen=True)
class ProposalConfig:
    base_segmentation_scale: float = 40.0
    min_region_size: int = 6
    merge_similarity_weights: tuple = (1.0, 1.0, 1.0, 1.0)  # colour, texture, size, fill
    max_proposals: int = 2000
    min_proposal_side: float = 4.0
    smoothing_sigma: float = 0.8

    def __post_init__(self):
        if self.max_proposals <= 0:
            raise InvalidArgumentError("max_proposals must be positive")
        if len(self.merge_similarity_weights) != 4 or min(self.merge_similarity_weights) < 0:
            raise InvalidArgumentError("merge_similarity_weights must be 4 non-negative reals")
        if sum(self.merge_similarity_weights) == 0:
            raise InvalidArgumentError("merge_similarity_weights must not all be zero")
        if self.min_region_size < 1 or self.base_segmentation_scale <= 0:
            raise InvalidArgumentError("segmentation scale and min_region_size must be positive")


@dataclass
class ProposalSet:
    boxes: np.ndarray  # (N, 4) x_min, y_min, x_max, y_max in pixels
    source_image_id: str = ""
    image_size: tuple = field(default=(0, 0))

    def __len__(self):
        return len(self.boxes)

    def as_bboxes(self) -> list[BBox]:
        return [BBox.from_array(b) for b in self.boxes]


def _region_histograms(r: Raster, labels: np.ndarray, n: int):
    px = r.pixels.astype(float)
    flat = labels.ravel()
    color = np.zeros((n, 3 * COLOR_BINS))
    for c in range(3):
        bins = np.minimum((px[..., c].ravel() * COLOR_BINS / 256.0).astype(int), COLOR_BINS - 1)
        color[:, c * COLOR_BINS:(c + 1) * COLOR_BINS] = np.bincount(
            flat * COLOR_BINS + bins, minlength=n * COLOR_BINS).reshape(n, COLOR_BINS)
    color /= np.maximum(color.sum(1, keepdims=True), 1e-12)

    gray = px.mean(axis=2)
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy).ravel()
    ang = np.mod(np.arctan2(gy, gx), 2 * np.pi).ravel()
    obin = np.minimum((ang * TEXTURE_BINS / (2 * np.pi)).astype(int), TEXTURE_BINS - 1)
    texture = np.bincount(flat * TEXTURE_BINS + obin, weights=mag,
                          minlength=n * TEXTURE_BINS).reshape(n, TEXTURE_BINS)
    tsum = texture.sum(1, keepdims=True)
    texture = np.where(tsum > 0, texture / np.maximum(tsum, 1e-12), 1.0 / TEXTURE_BINS)
    return color, texture


def _adjacent_pairs(labels: np.ndarray) -> set:
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        m = a != b
        lo = np.minimum(a[m], b[m])
        hi = np.maximum(a[m], b[m])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def segment(r: Raster, cfg: ProposalConfig) -> np.ndarray:
    """Over-segmentation labels ``(h, w)`` numbered densely from 0."""
    labels = felzenszwalb(r.pixels, scale=cfg.base_segmentation_scale,
                          sigma=cfg.smoothing_sigma, min_size=cfg.min_region_size)
    _, dense = np.unique(labels, return_inverse=True)
    return dense.reshape(labels.shape)


def hierarchical_regions(r: Raster, cfg: ProposalConfig) -> np.ndarray:
    """Boxes of every region in the merge hierarchy, in creation order."""
    labels = segment(r, cfg)
    n = int(labels.max()) + 1
    h, w = labels.shape
    image_area = float(h * w)
    color, texture = _region_histograms(r, labels, n)
    size = np.bincount(labels.ravel(), minlength=n).astype(float)
    ys, xs = np.indices(labels.shape)
    flat = labels.ravel()
    x0 = np.full(n, np.inf)
    y0 = np.full(n, np.inf)
    x1 = np.full(n, -np.inf)
    y1 = np.full(n, -np.inf)
    np.minimum.at(x0, flat, xs.ravel())
    np.minimum.at(y0, flat, ys.ravel())
    np.maximum.at(x1, flat, xs.ravel() + 1)
    np.maximum.at(y1, flat, ys.ravel() + 1)

    regions = {
        i: {"color": color[i], "texture": texture[i], "size": size[i],
            "box": np.array([x0[i], y0[i], x1[i], y1[i]])}
        for i in range(n)
    }
    neighbours = {i: set() for i in range(n)}
    for a, b in _adjacent_pairs(labels):
        neighbours[a].add(b)
        neighbours[b].add(a)
    wc, wt, ws, wf = cfg.merge_similarity_weights

    def similarity(a, b):
        ra, rb = regions[a], regions[b]
        s = 0.0
        if wc:
            s += wc * np.minimum(ra["color"], rb["color"]).sum()
        if wt:
            s += wt * np.minimum(ra["texture"], rb["texture"]).sum()
        if ws:
            s += ws * (1.0 - (ra["size"] + rb["size"]) / image_area)
        if wf:
            bx = np.concatenate([np.minimum(ra["box"][:2], rb["box"][:2]),
                                 np.maximum(ra["box"][2:], rb["box"][2:])])
            bb = (bx[2] - bx[0]) * (bx[3] - bx[1])
            s += wf * (1.0 - (bb - ra["size"] - rb["size"]) / image_area)
        return s

    heap = []
    for a in range(n):
        for b in neighbours[a]:
            if a < b:
                heap.append((-similarity(a, b), a, b))
    heapq.heapify(heap)
    alive = set(range(n))
    out = [regions[i]["box"] for i in range(n)]
    next_id = n
    while heap:
        _, a, b = heapq.heappop(heap)
        if a not in alive or b not in alive:
            continue
        ra, rb = regions[a], regions[b]
        sa, sb = ra["size"], rb["size"]
        merged = {
            "color": (ra["color"] * sa + rb["color"] * sb) / (sa + sb),
            "texture": (ra["texture"] * sa + rb["texture"] * sb) / (sa + sb),
            "size": sa + sb,
            "box": np.concatenate([np.minimum(ra["box"][:2], rb["box"][:2]),
                                   np.maximum(ra["box"][2:], rb["box"][2:])]),
        }
        c = next_id
        next_id += 1
        regions[c] = merged
        alive -= {a, b}
        nb = (neighbours.pop(a) | neighbours.pop(b)) - {a, b}
        for k in nb:
            neighbours[k] -= {a, b}
            neighbours[k].add(c)
        neighbours[c] = nb
        alive.add(c)
        out.append(merged["box"])
        for k in nb:
            heapq.heappush(heap, (-similarity(c, k), min(c, k), max(c, k)))
    return np.array(out, dtype=float).reshape(-1, 4)


def generate_proposals(r: Raster, cfg: ProposalConfig | None = None, image_id: str = "") -> ProposalSet:
    cfg = cfg or ProposalConfig()
    boxes = hierarchical_regions(r, cfg)
    # order of creation doubles as the score: segments first, then merges
    _, first = np.unique(boxes, axis=0, return_index=True)
    boxes = boxes[np.sort(first)]
    sides = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    boxes = boxes[sides >= cfg.min_proposal_side][: cfg.max_proposals]
    if len(boxes) == 0:
        boxes = np.array([[0.0, 0.0, float(r.width), float(r.height)]])
    return ProposalSet(boxes, image_id, r.size)


def write_proposals_csv(sets, fh):
    """Rows ``image_id,x_min,y_min,x_max,y_max`` for an iterable of ProposalSets."""
    writer = csv.writer(fh)
    writer.writerow(["image_id", "x_min", "y_min", "x_max", "y_max"])
    for ps in sets:
        for b in ps.boxes:
            writer.writerow([ps.source_image_id, *(f"{v:g}" for v in b)])
