"""Left/right splitting of side views and the four-way viewpoint classifier."""
from __future__ import annotations

from enum import Enum

import numpy as np

from .appearance import (
    HOG_DIM,
    PartClassifier,
    TrainConfig,
    extract_features,
    mirror_permutation,
    orientation_cells,
    resample_crops,
    train_classifier,
)
from .errors import InvalidArgumentError
from .raster import Raster


class Viewpoint(str, Enum):
    FRONT = "front"
    BACK = "back"
    LEFT = "left"
    RIGHT = "right"


VIEWPOINT_ORDER = [v.value for v in Viewpoint]


def whole_image_features(r: Raster) -> np.ndarray:
    return extract_features(r, r.full_box())


def horizontal_asymmetry(r: Raster) -> float:
    """Gradient energy of the left half minus the right half (fraction of the total)."""
    crop = resample_crops(r, np.array([[0, 0, r.width, r.height]], dtype=float))
    cells = orientation_cells(crop.mean(axis=-1))[0].sum(axis=-1)
    half = cells.shape[1] // 2
    total = cells.sum()
    if total <= 0:
        return 0.0
    return float((cells[:, :half].sum() - cells[:, half:].sum()) / total)


def split_side_views(images, seed: int = 0, max_iter: int = 50):
    """Split side-view images into ``(left_indices, right_indices)``.

    Two-means over gradient-orientation descriptors of the images and their
    mirrors, where each image and its mirror are always assigned to opposite
    clusters.  The cluster whose members carry more gradient energy on their
    left half is named ``left``.
    """
    images = list(images)
    if len(images) < 2:
        raise InvalidArgumentError("need at least two images to split")
    X = np.array([whole_image_features(r)[:HOG_DIM] for r in images])
    M = X[:, mirror_permutation()[:HOG_DIM]]
    allx = np.concatenate([X, M])
    # farthest-pair seeding over the augmented set
    sq = np.sum(allx ** 2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * allx @ allx.T
    a, _ = np.unravel_index(int(np.argmax(d2)), d2.shape)
    c = allx[a].copy()
    mirror_of = mirror_permutation()[:HOG_DIM]
    assign = None
    for _ in range(max_iter):
        cm = c[mirror_of]
        cost_a = np.sum((X - c) ** 2, 1) + np.sum((M - cm) ** 2, 1)
        cost_b = np.sum((X - cm) ** 2, 1) + np.sum((M - c) ** 2, 1)
        new = cost_a <= cost_b  # True: original in cluster A, mirror in cluster B
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        c = np.concatenate([X[assign], M[~assign]]).mean(axis=0)
    in_a = np.flatnonzero(assign).tolist()
    in_b = np.flatnonzero(~assign).tolist()
    asym = np.array([horizontal_asymmetry(r) for r in images])
    # cluster B's members are the mirrors of cluster A's centre, so compare signs
    score_a = asym[in_a].sum() - asym[in_b].sum()
    return (in_a, in_b) if score_a >= 0 else (in_b, in_a)


def train_viewpoint_classifier(features_by_viewpoint: dict, cfg: TrainConfig = TrainConfig()) -> PartClassifier:
    """4-way softmax; ``features_by_viewpoint`` maps each viewpoint to an ``(n, D)`` array."""
    X, y = [], []
    for k, vp in enumerate(VIEWPOINT_ORDER):
        feats = features_by_viewpoint.get(vp)
        if feats is None or len(feats) == 0:
            raise InvalidArgumentError(f"no training images for viewpoint {vp!r}")
        X.append(np.asarray(feats, dtype=float))
        y.extend([k] * len(feats))
    return train_classifier(np.concatenate(X), np.array(y), 4, cfg, stage_tag="V2")


def predict_viewpoint(V: PartClassifier, features) -> tuple[str, np.ndarray]:
    """Most probable viewpoint (ties go to the earlier enum member) and the probabilities."""
    probs = V.predict_proba(np.asarray(features, dtype=float)[None])[0]
    return VIEWPOINT_ORDER[int(np.argmax(probs))], probs


def predict_viewpoints(V: PartClassifier, features: np.ndarray) -> list[str]:
    probs = V.predict_proba(np.asarray(features, dtype=float).reshape(-1, V.dim))
    return [VIEWPOINT_ORDER[k] for k in np.argmax(probs, axis=1)]
