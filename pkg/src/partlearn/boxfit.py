"""Tight instance boxes from proposal-density seeded GrabCut.

The energy over binary labels ``l`` is

    E(l) = sum_i -log(M_i(l_i) + eps) + sum_i -log p(c_i | GMM_{l_i})
           + alpha * sum_{i~j} exp(-beta * |c_i - c_j|^2) [l_i != l_j]

where ``M_i(1)`` is the fraction of proposals whose box covers pixel ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError
from .geometry import BBox
from .gmm import ColorMixture, fit_color_mixture
from .graphcut import Segmentation, grid_edges, labeling_energy, min_cut_labeling
from .proposals import ProposalConfig, ProposalSet, generate_proposals
from .raster import Raster


@dataclass(frozen=True)
class SegEnergyConfig:
    alpha: float = 10.0
    beta_contrast: float | None = None  # None: 1 / (2 * mean squared neighbour difference)
    epsilon_log: float = 1e-6
    gmm_components: int = 5
    max_iterations: int = 10
    min_component_area_fraction: float = 0.01
    convergence_fraction: float = 0.001
    reg_covar: float = 1.0
    # initial foreground: prior above this fraction of the way from its minimum
    # to its maximum (0 means "covered by more proposals than the least covered pixel")
    init_threshold: float = 0.0

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgumentError("alpha must be >= 0")
        if self.epsilon_log <= 0:
            raise InvalidArgumentError("epsilon_log must be > 0")
        if self.gmm_components <= 0 or self.max_iterations <= 0:
            raise InvalidArgumentError("gmm_components and max_iterations must be positive")


@dataclass
class GrabCutResult:
    segmentation: Segmentation  # labels shaped (h, w)
    energies: list = field(default_factory=list)
    iterations: int = 0


def proposal_prior(proposals: ProposalSet, image_size) -> np.ndarray:
    """Per-pixel fraction of proposals whose box contains the pixel centre."""
    w, h = image_size
    boxes = np.asarray(proposals.boxes, dtype=float).reshape(-1, 4)
    if len(boxes) == 0:
        raise InvalidArgumentError("proposal prior needs at least one proposal")
    # 2-D difference array over pixel centres (x + 0.5, y + 0.5)
    acc = np.zeros((h + 1, w + 1))
    x0 = np.clip(np.ceil(boxes[:, 0] - 0.5), 0, w).astype(int)
    x1 = np.clip(np.ceil(boxes[:, 2] - 0.5), 0, w).astype(int)
    y0 = np.clip(np.ceil(boxes[:, 1] - 0.5), 0, h).astype(int)
    y1 = np.clip(np.ceil(boxes[:, 3] - 0.5), 0, h).astype(int)
    np.add.at(acc, (y0, x0), 1)
    np.add.at(acc, (y0, x1), -1)
    np.add.at(acc, (y1, x0), -1)
    np.add.at(acc, (y1, x1), 1)
    counts = acc.cumsum(0).cumsum(1)[:h, :w]
    return counts / len(boxes)


def initial_labels(prior: np.ndarray, cfg: SegEnergyConfig = SegEnergyConfig()) -> np.ndarray:
    lo, hi = float(prior.min()), float(prior.max())
    if hi <= lo:
        return np.full(prior.shape, hi >= 0.5)
    return prior > lo + cfg.init_threshold * (hi - lo)


def contrast_beta(pixels: np.ndarray) -> float:
    c = pixels.astype(float)
    dx = np.sum((c[:, 1:] - c[:, :-1]) ** 2, axis=-1).ravel()
    dy = np.sum((c[1:, :] - c[:-1, :]) ** 2, axis=-1).ravel()
    mean = np.concatenate([dx, dy]).mean() if dx.size + dy.size else 0.0
    return 0.0 if mean <= 0 else 1.0 / (2.0 * mean)


def _pairwise(pixels: np.ndarray, cfg: SegEnergyConfig):
    h, w = pixels.shape[:2]
    edges = grid_edges(h, w)
    flat = pixels.reshape(-1, 3).astype(float)
    d2 = np.sum((flat[edges[:, 0]] - flat[edges[:, 1]]) ** 2, axis=1)
    beta = contrast_beta(pixels) if cfg.beta_contrast is None else cfg.beta_contrast
    return edges, cfg.alpha * np.exp(-beta * d2)


def _unary(prior: np.ndarray, fg: ColorMixture, bg: ColorMixture, flat: np.ndarray, cfg) -> np.ndarray:
    m1 = prior.ravel()
    eps = cfg.epsilon_log
    u = np.empty((len(m1), 2))
    u[:, 0] = -np.log(1.0 - m1 + eps) - bg.log_density(flat)
    u[:, 1] = -np.log(m1 + eps) - fg.log_density(flat)
    return u


def energy(labels: np.ndarray, prior: np.ndarray, pixels: np.ndarray, fg: ColorMixture,
           bg: ColorMixture, cfg: SegEnergyConfig = SegEnergyConfig()) -> float:
    """Total segmentation energy of a ``(h, w)`` 0/1 labelling."""
    flat = pixels.reshape(-1, 3).astype(float)
    edges, weights = _pairwise(pixels, cfg)
    return labeling_energy(_unary(prior, fg, bg, flat, cfg), edges, weights, np.asarray(labels).ravel())


def _refit(flat, labels, k, previous, cfg, seed):
    """Re-estimate a mixture on the pixels of one label, warm-started when possible."""
    x = flat[labels]
    k = min(k, len(x))
    return fit_color_mixture(x, k, reg_covar=cfg.reg_covar, init=previous, seed=seed, max_iter=10)


def grabcut_iterate(r: Raster, prior: np.ndarray, cfg: SegEnergyConfig = SegEnergyConfig()) -> GrabCutResult:
    """Alternate min-cut labelling and colour-model re-estimation.

    A refit mixture is only adopted when it lowers the energy of the current
    labelling, which keeps the recorded energy sequence non-increasing.
    """
    h, w = r.height, r.width
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (h, w):
        raise InvalidArgumentError(f"prior shape {prior.shape} != image {(h, w)}")
    if np.any(prior < 0) or np.any(prior > 1):
        raise InvalidArgumentError("prior values must lie in [0, 1]")
    labels = initial_labels(prior, cfg).ravel()
    n = labels.size
    if labels.all() or not labels.any():
        seg = Segmentation(labels.reshape(h, w).astype(np.uint8), float("nan"))
        return GrabCutResult(seg, [], 0)
    flat = r.pixels.reshape(-1, 3).astype(float)
    edges, weights = _pairwise(r.pixels, cfg)
    eps = cfg.epsilon_log
    prior_cost = np.stack([-np.log(1.0 - prior.ravel() + eps), -np.log(prior.ravel() + eps)], 1)
    k = cfg.gmm_components
    fg = _refit(flat, labels, k, None, cfg, 0)
    bg = _refit(flat, ~labels, k, None, cfg, 1)
    energies = []
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        unary = prior_cost - np.stack([bg.log_density(flat), fg.log_density(flat)], 1)
        seg = min_cut_labeling(unary, edges, weights)
        new = seg.labels.astype(bool)
        changed = int(np.count_nonzero(new != labels))
        labels = new
        energies.append(seg.energy)
        if changed < cfg.convergence_fraction * n or labels.all() or not labels.any():
            break
        cur_fg, cur_bg = fg, bg
        cand_fg = _refit(flat, labels, k, fg if fg.k == min(k, labels.sum()) else None, cfg, 0)
        cand_bg = _refit(flat, ~labels, k, bg if bg.k == min(k, (~labels).sum()) else None, cfg, 1)
        base = seg.energy
        for cand_name in ("fg", "bg"):
            trial_fg = cand_fg if cand_name == "fg" else fg
            trial_bg = cand_bg if cand_name == "bg" else bg
            trial_u = prior_cost - np.stack([trial_bg.log_density(flat), trial_fg.log_density(flat)], 1)
            e = labeling_energy(trial_u, edges, weights, labels)
            if e <= base:
                fg, bg, base = trial_fg, trial_bg, e
        if fg is cur_fg and bg is cur_bg:
            break
    seg = Segmentation(labels.reshape(h, w).astype(np.uint8), energies[-1])
    return GrabCutResult(seg, energies, it)


def boxes_from_segmentation(labels: np.ndarray, cfg: SegEnergyConfig = SegEnergyConfig()) -> list[BBox]:
    """Tight box of each 4-connected foreground component above the area floor."""
    labels = np.asarray(labels).astype(bool)
    comp, n = ndimage.label(labels)
    if n == 0:
        return []
    min_area = cfg.min_component_area_fraction * labels.size
    areas = np.bincount(comp.ravel(), minlength=n + 1)
    out = []
    for idx, sl in enumerate(ndimage.find_objects(comp), start=1):
        if sl is None or areas[idx] < min_area:
            continue
        ys, xs = sl
        out.append(BBox(float(xs.start), float(ys.start), float(xs.stop), float(ys.stop)))
    return out


def fit_instance_boxes(r: Raster, cfg: SegEnergyConfig = SegEnergyConfig(),
                       proposal_cfg: ProposalConfig | None = None) -> list[BBox]:
    """Proposals -> density prior -> GrabCut -> one box per connected component."""
    return fit_instance_boxes_detailed(r, cfg, proposal_cfg)[0]


def fit_instance_boxes_detailed(r: Raster, cfg: SegEnergyConfig = SegEnergyConfig(),
                                proposal_cfg: ProposalConfig | None = None):
    proposals = generate_proposals(r, proposal_cfg)
    prior = proposal_prior(proposals, r.size)
    result = grabcut_iterate(r, prior, cfg)
    return boxes_from_segmentation(result.segmentation.labels, cfg), result, prior
