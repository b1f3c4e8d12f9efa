"""Crop descriptors and multinomial softmax part classifiers.

Descriptor: each box is bilinearly resampled to a 64x64 crop; the grey-level
gradient orientation histogram uses 9 unsigned bins with linear vote
interpolation, 8x8-pixel cells and L2-normalised 2x2-cell blocks; a 3x3x3
RGB colour histogram (L1-normalised) is appended.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .raster import Raster

log = logging.getLogger(__name__)

CROP = 64
CELL = 8
ORIENT_BINS = 9
BLOCK = 2
COLOR_LEVELS = 3
_CELLS = CROP // CELL
_BLOCKS = _CELLS - BLOCK + 1
HOG_DIM = _BLOCKS * _BLOCKS * BLOCK * BLOCK * ORIENT_BINS
COLOR_DIM = COLOR_LEVELS ** 3
FEATURE_DIM = HOG_DIM + COLOR_DIM
# Block-norm floor in gradient units (0-255 intensities). Keeps flat and
# near-flat blocks from being inflated into full-contrast descriptors.
BLOCK_EPS = 100.0

STAGE_TAGS = ("A0", "A1", "A2", "A3", "ROOT", "V2")


def resample_crops(r: Raster, boxes: np.ndarray, size: int = CROP) -> np.ndarray:
    """Bilinear resampling of each box to ``size x size`` -> ``(N, size, size, 3)`` floats."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    if np.any(widths <= 0) or np.any(heights <= 0):
        raise InvalidArgumentError("degenerate box passed to feature extraction")
    h, w = r.height, r.width
    if np.any(boxes[:, 0] < -1e-6) or np.any(boxes[:, 1] < -1e-6) or \
            np.any(boxes[:, 2] > w + 1e-6) or np.any(boxes[:, 3] > h + 1e-6):
        raise InvalidArgumentError("box extends outside the image")
    t = (np.arange(size) + 0.5) / size
    xs = np.clip(boxes[:, 0, None] + t[None] * widths[:, None] - 0.5, 0, w - 1)
    ys = np.clip(boxes[:, 1, None] + t[None] * heights[:, None] - 0.5, 0, h - 1)
    ay = _interp_matrix(ys, h)
    ax = _interp_matrix(xs, w)
    img = r.pixels.astype(float).reshape(h, w * 3)
    rows = (ay @ img).reshape(len(boxes), size, w, 3).transpose(0, 1, 3, 2)
    return (rows @ ax.transpose(0, 2, 1)[:, None]).transpose(0, 1, 3, 2)


def _interp_matrix(coords: np.ndarray, n_src: int) -> np.ndarray:
    """Linear-interpolation weights ``(N, S, n_src)`` for sample positions ``(N, S)``."""
    n, s = coords.shape
    i0 = np.floor(coords).astype(np.intp)
    f = coords - i0
    i1 = np.minimum(i0 + 1, n_src - 1)
    m = np.zeros((n, s, n_src))
    a = np.arange(n)[:, None]
    b = np.arange(s)[None, :]
    np.add.at(m, (a, b, i0), 1 - f)
    np.add.at(m, (a, b, i1), f)
    return m


def orientation_cells(gray: np.ndarray) -> np.ndarray:
    """Per-cell orientation histograms ``(N, cells, cells, 9)`` of ``(N, 64, 64)`` grey crops."""
    n = gray.shape[0]
    gy, gx = np.gradient(gray, axis=(1, 2))
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    pos = theta / (np.pi / ORIENT_BINS)  # bin centres at multiples of 20 degrees
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    lo %= ORIENT_BINS
    hi = (lo + 1) % ORIENT_BINS
    cy, cx = np.divmod(np.arange(CROP * CROP), CROP)
    cell = ((cy // CELL) * _CELLS + (cx // CELL)).reshape(CROP, CROP)
    base = (np.arange(n)[:, None, None] * (_CELLS * _CELLS) + cell[None]) * ORIENT_BINS
    total = n * _CELLS * _CELLS * ORIENT_BINS
    hist = np.bincount((base + lo).ravel(), weights=(mag * (1 - frac)).ravel(), minlength=total)
    hist += np.bincount((base + hi).ravel(), weights=(mag * frac).ravel(), minlength=total)
    return hist.reshape(n, _CELLS, _CELLS, ORIENT_BINS)


def block_normalize(cells: np.ndarray) -> np.ndarray:
    n = cells.shape[0]
    blocks = np.stack(
        [cells[:, i:i + _BLOCKS, j:j + _BLOCKS] for i in range(BLOCK) for j in range(BLOCK)], axis=3
    )  # (n, by, bx, 4, 9)
    blocks = blocks.reshape(n, _BLOCKS, _BLOCKS, -1)
    norm = np.sqrt(np.sum(blocks ** 2, axis=-1, keepdims=True) + BLOCK_EPS ** 2)
    return (blocks / norm).reshape(n, -1)


def color_histogram(crops: np.ndarray) -> np.ndarray:
    q = np.minimum((crops * COLOR_LEVELS / 256.0).astype(int), COLOR_LEVELS - 1)
    idx = (q[..., 0] * COLOR_LEVELS + q[..., 1]) * COLOR_LEVELS + q[..., 2]
    n = crops.shape[0]
    hist = np.bincount((idx + np.arange(n)[:, None, None] * COLOR_DIM).ravel(),
                       minlength=n * COLOR_DIM).reshape(n, COLOR_DIM).astype(float)
    return hist / hist.sum(axis=1, keepdims=True)


def extract_features_batch(r: Raster, boxes, chunk: int = 256) -> np.ndarray:
    """Descriptors for many boxes of one image -> ``(N, FEATURE_DIM)``."""
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    out = np.empty((len(boxes), FEATURE_DIM))
    for s in range(0, len(boxes), chunk):
        crops = resample_crops(r, boxes[s:s + chunk])
        gray = crops.mean(axis=-1)
        out[s:s + chunk, :HOG_DIM] = block_normalize(orientation_cells(gray))
        out[s:s + chunk, HOG_DIM:] = color_histogram(crops)
    return out


def extract_features(r: Raster, box) -> np.ndarray:
    b = box.as_array() if hasattr(box, "as_array") else np.asarray(box, dtype=float)
    return extract_features_batch(r, b[None])[0]


def mirror_permutation() -> np.ndarray:
    """Index map ``p`` with ``features(mirror)[k] == features(original)[p[k]]``."""
    idx = np.arange(HOG_DIM).reshape(_BLOCKS, _BLOCKS, BLOCK, BLOCK, ORIENT_BINS)
    # mirror: block column reversed, cell column inside the block reversed,
    # orientation bin k -> -k (mod 9)
    flipped = idx[:, ::-1, :, ::-1, :]
    flipped = flipped[..., (-np.arange(ORIENT_BINS)) % ORIENT_BINS]
    return np.concatenate([flipped.ravel(), HOG_DIM + np.arange(COLOR_DIM)])


# ---------------------------------------------------------------- classifier

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_iterations: int = 1000
    batch_size: int = 32
    l2_penalty: float = 1e-3
    early_stop_patience: int = 10  # 0 disables early stopping
    eval_every: int = 20
    holdout_fraction: float = 0.2
    balanced: bool = False
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.max_iterations <= 0 or self.batch_size <= 0:
            raise InvalidArgumentError("max_iterations and batch_size must be positive")
        if not 0 <= self.holdout_fraction < 1:
            raise InvalidArgumentError("holdout_fraction must be in [0, 1)")


@dataclass
class PartClassifier:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray  # (C,)
    part_count: int
    has_background_class: bool
    stage_tag: str
    loss_trace: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        if self.stage_tag not in STAGE_TAGS:
            raise InvalidArgumentError(f"unknown stage tag {self.stage_tag!r}")
        expected = self.part_count + (1 if self.has_background_class else 0)
        if self.weights.shape[0] != expected or self.bias.shape != (expected,):
            raise InvalidArgumentError(
                f"{self.stage_tag}: {self.weights.shape[0]} classes, expected {expected}")
        if self.stage_tag == "ROOT" and not (self.has_background_class and expected == 2):
            raise InvalidArgumentError("ROOT classifier must be object-vs-background")

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=float)
        if x.shape[-1] != self.dim:
            raise InvalidArgumentError(f"feature length {x.shape[-1]} != classifier input {self.dim}")
        return x @ self.weights.T + self.bias

    def predict_proba(self, features) -> np.ndarray:
        return softmax(self.logits(features))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def score(clf: PartClassifier, f) -> np.ndarray:
    """Class probabilities for one feature vector."""
    return clf.predict_proba(np.asarray(f, dtype=float)[None])[0]


def loss_and_grad(W, b, X, y, l2=0.0, sample_weight=None):
    """Mean (weighted) softmax cross-entropy plus ``l2/2 * |W|^2`` and its gradient."""
    n = len(X)
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    sw = sw / sw.sum()
    z = X @ W.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    loss = -float(np.sum(sw * logp[np.arange(n), y])) + 0.5 * l2 * float(np.sum(W * W))
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    g *= sw[:, None]
    return loss, g.T @ X + l2 * W, g.sum(axis=0)


def _split_holdout(y, frac, rng):
    train, hold = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(np.floor(frac * len(idx)))
        k = min(k, len(idx) - 1)
        hold.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(hold, dtype=int))


def train_classifier(features, labels, class_count: int, cfg: TrainConfig = TrainConfig(),
                     stage_tag: str = "A1", has_background_class: bool = False,
                     init: PartClassifier | None = None) -> PartClassifier:
    """Mini-batch gradient descent on softmax cross-entropy with early stopping.

    Inputs are standardised with statistics of the training rows and the
    transform is folded back into the returned weights, so the classifier
    consumes raw descriptors.
    """
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise InvalidArgumentError("features must be (N, D) with one label per row")
    if len(y) == 0 or y.min() < 0 or y.max() >= class_count:
        raise InvalidArgumentError("labels must lie in [0, class_count)")
    counts = np.bincount(y, minlength=class_count)
    if np.any(counts == 0):
        missing = np.flatnonzero(counts == 0).tolist()
        raise InvalidArgumentError(f"no training samples for classes {missing}")
    rng = np.random.default_rng(cfg.seed)
    use_holdout = cfg.early_stop_patience > 0 and cfg.holdout_fraction > 0
    tr, ho = _split_holdout(y, cfg.holdout_fraction, rng) if use_holdout else (np.arange(len(y)), np.array([], int))
    if len(ho) == 0:
        use_holdout = False

    if cfg.standardize:
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd = np.where(sd > 1e-8, sd, 1.0)
    else:
        mu, sd = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - mu) / sd
    weights_per_class = (len(y) / (class_count * counts)) if cfg.balanced else np.ones(class_count)
    sw = weights_per_class[y]

    parts = class_count - (1 if has_background_class else 0)
    if init is not None and init.weights.shape == (class_count, X.shape[1]):
        # warm start: express the given raw-space classifier in standardised space
        W = init.weights * sd
        b = init.bias + init.weights @ mu
    else:
        W = np.zeros((class_count, X.shape[1]))
        b = np.zeros(class_count)

    def full_loss(idx, W, b):
        return loss_and_grad(W, b, Z[idx], y[idx], cfg.l2_penalty, sw[idx])[0]

    init_loss = full_loss(tr, W, b)
    best = (full_loss(ho, W, b) if use_holdout else init_loss, W.copy(), b.copy())
    trace = [init_loss]
    bad = 0
    n = len(tr)
    order = rng.permutation(n)
    pos = 0
    for it in range(1, cfg.max_iterations + 1):
        if cfg.batch_size >= n:
            batch = tr
        else:
            if pos + cfg.batch_size > n:
                order = rng.permutation(n)
                pos = 0
            batch = tr[order[pos:pos + cfg.batch_size]]
            pos += cfg.batch_size
        _, gW, gb = loss_and_grad(W, b, Z[batch], y[batch], cfg.l2_penalty, sw[batch])
        W -= cfg.learning_rate * gW
        b -= cfg.learning_rate * gb
        if it % cfg.eval_every == 0 or it == cfg.max_iterations:
            trace.append(full_loss(tr, W, b))
            if use_holdout:
                hl = full_loss(ho, W, b)
                if hl < best[0] - 1e-12:
                    best = (hl, W.copy(), b.copy())
                    bad = 0
                else:
                    bad += 1
                    if bad >= cfg.early_stop_patience:
                        break
    if use_holdout:
        W, b = best[1], best[2]
    if full_loss(tr, W, b) > init_loss:
        log.debug("training did not improve on the initial loss; keeping the initial parameters")
        W = np.zeros_like(W) if init is None else init.weights * sd
        b = np.zeros_like(b) if init is None else init.bias + init.weights @ mu
    raw_W = W / sd
    raw_b = b - raw_W @ mu
    return PartClassifier(raw_W, raw_b, parts, has_background_class, stage_tag, trace)
