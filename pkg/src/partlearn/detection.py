"""Part and object detection plus the evaluation metrics used to compare stages."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .appearance import PartClassifier, TrainConfig, extract_features_batch, train_classifier
from .errors import InvalidArgumentError, InvalidStateError
from .geometry import BBox, Detection, contains_array, iou_matrix, nms_indices
from .mining import MiningConfig, combine_scores
from .pipeline import FeatureCache, ModelBundle, StageConfig
from .proposals import ProposalConfig, generate_proposals
from .raster import Raster, crop
from .viewpoint import VIEWPOINT_ORDER, predict_viewpoints

DEFAULT_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


# ---------------------------------------------------------------- metrics

@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    ap: float
    undefined: bool = False  # no ground truth and no detections
    n_ground_truth: int = 0


def ap_from_matches(scores, is_tp, n_gt: int) -> PRCurve:
    """All-point interpolated AP from per-detection true/false positive flags."""
    scores = np.asarray(scores, dtype=float)
    is_tp = np.asarray(is_tp, dtype=bool)
    if n_gt == 0:
        return PRCurve(np.zeros(0), np.zeros(0), 0.0, undefined=len(scores) == 0)
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    if len(recall) == 0:
        return PRCurve(recall, precision, 0.0, n_ground_truth=n_gt)
    mono = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    ap = float(np.sum((recall - prev) * mono))
    return PRCurve(recall, precision, ap, n_ground_truth=n_gt)


def match_detections(detections, ground_truth: dict, iou_threshold: float = 0.4):
    """Greedy matching in descending score order.

    Args:
        detections: ``(image_id, Detection)`` pairs of a single part or class.
        ground_truth: image id -> list of BBox of that part or class.

    Returns:
        ``(scores, is_tp, n_gt)``.
    """
    dets = list(detections)
    scores = np.array([d.score for _, d in dets], dtype=float)
    order = np.argsort(-scores, kind="stable")
    gt_arrays = {k: np.array([b.as_tuple() for b in v], dtype=float).reshape(-1, 4) for k, v in ground_truth.items()}
    used = {k: np.zeros(len(v), bool) for k, v in gt_arrays.items()}
    is_tp = np.zeros(len(dets), bool)
    for j in order:
        iid, d = dets[j]
        g = gt_arrays.get(iid)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(d.box.as_array()[None], g)[0]
        ov[used[iid]] = -1.0
        k = int(np.argmax(ov))
        if ov[k] >= iou_threshold:
            used[iid][k] = True
            is_tp[j] = True
    n_gt = sum(len(v) for v in gt_arrays.values())
    return scores, is_tp, n_gt


def average_precision(detections, ground_truth: dict, iou_threshold: float = 0.4) -> PRCurve:
    scores, is_tp, n_gt = match_detections(detections, ground_truth, iou_threshold)
    return ap_from_matches(scores, is_tp, n_gt)


def part_average_precisions(detections_by_image: dict, part_truth: dict, part_count: int,
                            iou_threshold: float = 0.4) -> list:
    """Per-part PR curves.

    ``detections_by_image`` maps image id -> Detections (``part_id`` set);
    ``part_truth`` maps image id -> ``[(part_id, BBox)]``.
    """
    curves = []
    for i in range(part_count):
        dets = [(iid, d) for iid, ds in detections_by_image.items() for d in ds if d.part_id == i]
        gt = {iid: [b for pid, b in parts if pid == i] for iid, parts in part_truth.items()}
        curves.append(average_precision(dets, gt, iou_threshold))
    return curves


def mean_ap(curves) -> float:
    return float(np.mean([c.ap for c in curves])) if curves else 0.0


@dataclass
class ViewpointReport:
    accuracy: float  # correct / total
    per_class_accuracy: dict
    mean_class_accuracy: float
    per_class_ap: dict
    confusion: np.ndarray  # rows: truth, columns: prediction


def viewpoint_accuracy(true_labels, probabilities) -> ViewpointReport:
    """Accuracy and one-vs-rest AP of viewpoint predictions (rows of ``probabilities``)."""
    probs = np.asarray(probabilities, dtype=float)
    truth = np.array([VIEWPOINT_ORDER.index(t) for t in true_labels], dtype=int)
    if probs.shape != (len(truth), len(VIEWPOINT_ORDER)):
        raise InvalidArgumentError("need one probability row per label")
    pred = np.argmax(probs, axis=1)
    conf = np.zeros((4, 4), dtype=int)
    np.add.at(conf, (truth, pred), 1)
    per_acc, per_ap = {}, {}
    for k, vp in enumerate(VIEWPOINT_ORDER):
        n = conf[k].sum()
        per_acc[vp] = float(conf[k, k] / n) if n else float("nan")
        per_ap[vp] = ap_from_matches(probs[:, k], truth == k, int(np.sum(truth == k))).ap
    valid = [v for v in per_acc.values() if not np.isnan(v)]
    return ViewpointReport(float(np.trace(conf) / max(conf.sum(), 1)), per_acc,
                           float(np.mean(valid)) if valid else 0.0, per_ap, conf)


def align_side_names(true_labels, probabilities) -> np.ndarray:
    """Swap the left/right probability columns when that agrees better with the labels.

    Side views are split without supervision, so which cluster is called
    ``left`` is a naming convention. Scoring against planted labels therefore
    fixes the naming by majority first; front/back are unaffected.
    """
    probs = np.asarray(probabilities, dtype=float)
    truth = np.array([VIEWPOINT_ORDER.index(t) for t in true_labels], dtype=int)
    pred = np.argmax(probs, axis=1)
    li, ri = VIEWPOINT_ORDER.index("left"), VIEWPOINT_ORDER.index("right")
    kept = np.sum((truth == li) & (pred == li)) + np.sum((truth == ri) & (pred == ri))
    swapped = np.sum((truth == li) & (pred == ri)) + np.sum((truth == ri) & (pred == li))
    if swapped <= kept:
        return probs
    out = probs.copy()
    out[:, [li, ri]] = probs[:, [ri, li]]
    return out


# ---------------------------------------------------------------- part detection

@dataclass(frozen=True)
class DetectionConfig:
    nms_iou: float = 0.3
    mining: MiningConfig = MiningConfig()  # supplies the A+L combination weights


@dataclass
class PartScorer:
    """Appearance model plus (optionally) location models and a viewpoint classifier."""
    appearance: PartClassifier
    location_models: dict | None = None
    viewpoint: PartClassifier | None = None

    @classmethod
    def from_bundle(cls, b: ModelBundle, use_location: bool = True) -> "PartScorer":
        if b.stage == "T1" or not use_location:
            return cls(b.appearance, None, b.viewpoint)
        return cls(b.appearance, b.location_models, b.viewpoint)

    def viewpoint_of(self, whole_features) -> str:
        if self.viewpoint is None:
            raise InvalidStateError("no viewpoint classifier available")
        return predict_viewpoints(self.viewpoint, np.asarray(whole_features)[None])[0]

    def score_proposals(self, im, cfg: DetectionConfig = DetectionConfig(), viewpoint: str | None = None):
        """``(K, P)`` part scores of the proposals of one object image."""
        P = self.appearance.part_count
        probs = self.appearance.predict_proba(im.features)[:, :P]
        if self.location_models is None:
            return probs
        vp = viewpoint or self.viewpoint_of(im.whole_features)
        out = np.empty_like(probs)
        for i in range(P):
            m = self.location_models[(i, vp)]
            if m.is_empty:
                out[:, i] = probs[:, i]
            else:
                out[:, i] = combine_scores(probs[:, i], m.scores(im.boxes, im.image_size), cfg.mining)
        return out

    def detect(self, im, cfg: DetectionConfig = DetectionConfig(), offset=(0.0, 0.0),
               viewpoint: str | None = None) -> list:
        """Per-part NMS over the proposals of ``im``; boxes shifted by ``offset``."""
        if len(im.boxes) == 0:
            return []
        s = self.score_proposals(im, cfg, viewpoint)
        dets = []
        for i in range(s.shape[1]):
            for k in nms_indices(im.boxes, s[:, i], cfg.nms_iou):
                dets.append(Detection(BBox.from_array(im.boxes[k]).translate(*offset), float(s[k, i]), i))
        dets.sort(key=lambda d: -d.score)
        return dets


def object_crop_proposals(r: Raster, object_box: BBox, cache: FeatureCache, key: str):
    """Proposals of the object crop and the crop's offset inside ``r``."""
    c, window = crop(r, object_box)
    return cache.get(key, c), (window.x_min, window.y_min)


def bundle_proposal_config(bundle: ModelBundle) -> ProposalConfig:
    if not bundle.config:
        return ProposalConfig()
    return StageConfig.from_dict(bundle.config).proposals


def detect_parts(bundle: ModelBundle, r: Raster, object_box: BBox | None = None,
                 cfg: DetectionConfig = DetectionConfig(), use_location: bool = True,
                 cache: FeatureCache | None = None, key: str = "") -> list:
    """Part detections (image coordinates) inside ``object_box`` (whole image if None)."""
    if use_location and bundle.stage == "T1" and cfg.mining.location_weight > 0:
        # appearance-only is the only meaningful reading of a T1 bundle
        use_location = False
    cache = cache or FeatureCache(bundle_proposal_config(bundle))
    box = object_box if object_box is not None else r.full_box()
    im, offset = object_crop_proposals(r, box, cache, key or f"{id(r)}:{box.as_tuple()}")
    return PartScorer.from_bundle(bundle, use_location).detect(im, cfg, offset)


# ---------------------------------------------------------------- object detection

@dataclass(frozen=True)
class ObjectDetectorConfig:
    alpha: tuple = ()  # per-part appearance weights
    beta: tuple = ()  # per-part location weights
    cross_validation_grid: tuple = DEFAULT_GRID
    nms_iou: float = 0.3
    min_object_side: float = 12.0

    def __post_init__(self):
        if any(v < 0 for v in tuple(self.alpha) + tuple(self.beta)):
            raise InvalidArgumentError("part weights must be non-negative")
        if len(self.alpha) != len(self.beta):
            raise InvalidArgumentError("alpha and beta need one entry per part")


@dataclass
class ObjectCandidates:
    """Everything needed to score object proposals of one image under any weights."""
    image_id: str
    boxes: np.ndarray  # (K, 4) object proposals
    root: np.ndarray  # (K,)
    appearance: list  # per object: (M_k, P) appearance scores of contained part proposals
    location: list  # per object: (M_k, P) location densities under V(w)

    def part_sum(self, alpha, beta) -> np.ndarray:
        alpha = np.asarray(alpha, float)
        beta = np.asarray(beta, float)
        out = np.zeros(len(self.boxes))
        for k, (a, l) in enumerate(zip(self.appearance, self.location)):
            if len(a):
                out[k] = np.max(alpha * a + beta * l, axis=0).sum()
        return out

    def scores(self, alpha, beta) -> np.ndarray:
        return self.root + self.part_sum(alpha, beta)


def object_candidates(root: PartClassifier, bundle: ModelBundle, r: Raster, proposal_cfg: ProposalConfig,
                      min_object_side: float = 12.0, image_id: str = "", cache: FeatureCache | None = None
                      ) -> ObjectCandidates:
    if root.stage_tag != "ROOT":
        raise InvalidArgumentError("root must be a ROOT classifier")
    if bundle.stage == "T1":
        raise InvalidStateError("object detection with parts needs a T2 or T3 bundle")
    if cache is not None:
        im = cache.get(f"{image_id}@full", r)
        boxes, feats = im.boxes, im.features
    else:
        boxes = generate_proposals(r, proposal_cfg, image_id).boxes
        feats = extract_features_batch(r, boxes)
    P = bundle.part_count
    R = root.predict_proba(feats)[:, 0]
    A = bundle.appearance.predict_proba(feats)[:, :P]
    side = np.minimum(boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1])
    objects = np.flatnonzero(side >= min_object_side)
    vps = predict_viewpoints(bundle.viewpoint, feats[objects]) if len(objects) else []
    inside = contains_array(boxes[objects], boxes)  # (n_obj, K)
    app, loc = [], []
    for row, k in enumerate(objects):
        w = boxes[k]
        members = np.flatnonzero(inside[row])
        rel = boxes[members] - np.array([w[0], w[1], w[0], w[1]])
        size = (w[2] - w[0], w[3] - w[1])
        L = np.zeros((len(members), P))
        for i in range(P):
            m = bundle.location_models[(i, vps[row])]
            if not m.is_empty and len(members):
                L[:, i] = m.scores(rel, size)
        app.append(A[members])
        loc.append(L)
    return ObjectCandidates(image_id, boxes[objects], R[objects], app, loc)


def detections_from_candidates(c: ObjectCandidates, alpha, beta, nms_iou: float = 0.3) -> list:
    s = c.scores(alpha, beta)
    keep = nms_indices(c.boxes, s, nms_iou) if len(s) else []
    return [Detection(BBox.from_array(c.boxes[k]), float(s[k]), 0) for k in keep]


def detect_objects(root: PartClassifier, bundle: ModelBundle, r: Raster, cfg: ObjectDetectorConfig,
                   proposal_cfg: ProposalConfig = ProposalConfig(), image_id: str = "") -> list:
    """Root score plus the best weighted part evidence inside each object proposal."""
    P = bundle.part_count
    alpha = cfg.alpha if cfg.alpha else (0.0,) * P
    beta = cfg.beta if cfg.beta else (0.0,) * P
    if len(alpha) != P:
        raise InvalidArgumentError(f"expected {P} part weights, got {len(alpha)}")
    c = object_candidates(root, bundle, r, proposal_cfg, cfg.min_object_side, image_id)
    return detections_from_candidates(c, alpha, beta, cfg.nms_iou)


def object_map(candidates, truth: dict, alpha, beta, nms_iou=0.3, iou_threshold=0.5) -> float:
    dets = [(c.image_id, d) for c in candidates for d in detections_from_candidates(c, alpha, beta, nms_iou)]
    return average_precision(dets, truth, iou_threshold).ap


def cross_validate_weights(candidates, truth: dict, part_count: int, grid=DEFAULT_GRID, nms_iou: float = 0.3,
                           iou_threshold: float = 0.5, rounds: int = 2):
    """Coordinate search over per-part ``alpha`` and a shared ``beta`` scale on held-out images.

    Starts from all-zero weights (root only) and only accepts strict
    improvements, so the result is never worse than the root alone on the
    held-out split.
    """
    alpha = [0.0] * part_count
    beta_scale = 0.0
    best = object_map(candidates, truth, alpha, [beta_scale] * part_count, nms_iou, iou_threshold)
    for _ in range(rounds):
        changed = False
        for i in range(part_count):
            for g in grid:
                trial = list(alpha)
                trial[i] = g
                v = object_map(candidates, truth, trial, [beta_scale] * part_count, nms_iou, iou_threshold)
                if v > best + 1e-12:
                    best, alpha, changed = v, trial, True
        for g in grid:
            v = object_map(candidates, truth, alpha, [g] * part_count, nms_iou, iou_threshold)
            if v > best + 1e-12:
                best, beta_scale, changed = v, g, True
        if not changed:
            break
    return tuple(alpha), (beta_scale,) * part_count, best


def train_root(images, object_boxes, proposal_cfg: ProposalConfig = ProposalConfig(),
               cfg: TrainConfig = TrainConfig(), negatives_per_image: int = 10, seed: int = 0,
               cache: FeatureCache | None = None, image_ids=None) -> PartClassifier:
    """Object-vs-background classifier from ground-truth boxes and low-overlap proposals."""
    rng = np.random.default_rng(seed)
    X, y = [], []
    for n, (r, box) in enumerate(zip(images, object_boxes)):
        if cache is not None:
            im = cache.get(f"{image_ids[n]}@full", r)
            boxes, feats = im.boxes, im.features
        else:
            boxes = generate_proposals(r, proposal_cfg).boxes
            feats = extract_features_batch(r, boxes)
        pos_box = np.array([box.as_tuple()])
        X.append(extract_features_batch(r, pos_box)[0])
        y.append(0)
        ov = iou_matrix(boxes, pos_box)[:, 0]
        for k in np.flatnonzero(ov >= 0.7):
            X.append(feats[k])
            y.append(0)
        pool = np.flatnonzero(ov < 0.3)
        for k in rng.choice(pool, size=min(len(pool), negatives_per_image), replace=False) if len(pool) else []:
            X.append(feats[k])
            y.append(1)
    cfg = dataclasses.replace(cfg, balanced=True, seed=seed)
    return train_classifier(np.array(X), np.array(y), 2, cfg, "ROOT", has_background_class=True)
