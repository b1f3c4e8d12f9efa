"""Full-covariance Gaussian mixtures over RGB colours, fitted by EM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError

LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class ColorMixture:
    weights: np.ndarray  # (k,)
    means: np.ndarray  # (k, 3)
    covariances: np.ndarray  # (k, 3, 3)
    log_likelihood_trace: list = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.weights)

    def component_log_density(self, x: np.ndarray) -> np.ndarray:
        """``log(w_k N(x | mu_k, S_k))`` as an ``(N, k)`` array."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        chol = np.linalg.cholesky(self.covariances)
        inv_chol = np.linalg.inv(chol)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        out = np.empty((len(x), self.k))
        for j in range(self.k):
            z = (x - self.means[j]) @ inv_chol[j].T
            out[:, j] = logw[j] - 0.5 * (3 * LOG_2PI + logdet[j] + np.einsum("ij,ij->i", z, z))
        return out

    def log_density(self, x: np.ndarray) -> np.ndarray:
        comp = self.component_log_density(x)
        top = comp.max(axis=1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        return (top + np.log(np.sum(np.exp(comp - top), axis=1, keepdims=True))).ravel()

    def mean_log_likelihood(self, x: np.ndarray) -> float:
        return float(np.mean(self.log_density(x)))


def _kmeans_init(x: np.ndarray, k: int, rng, iters: int = 5) -> np.ndarray:
    centers = [x[int(rng.integers(len(x)))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers.append(centers[-1])
            continue
        idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    c = np.array(centers, dtype=float)
    for _ in range(iters):
        assign = np.argmin(((x[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
        for j in range(k):
            m = assign == j
            if m.any():
                c[j] = x[m].mean(0)
    return c


def _m_step(x, resp, reg):
    nk = resp.sum(0) + 1e-10
    weights = nk / nk.sum()
    means = (resp.T @ x) / nk[:, None]
    covs = np.empty((len(nk), 3, 3))
    for j in range(len(nk)):
        d = x - means[j]
        covs[j] = (resp[:, j, None] * d).T @ d / nk[j] + reg * np.eye(3)
    return weights, means, covs


def fit_color_mixture(pixels, k: int = 5, max_iter: int = 20, tol: float = 1e-4,
                      reg_covar: float = 1.0, init: ColorMixture | None = None,
                      seed: int = 0) -> ColorMixture:
    """EM fit of a ``k``-component mixture.

    ``init`` warm-starts EM from an existing mixture (GrabCut re-estimation);
    otherwise responsibilities start from a seeded k-means++ partition.  A step
    that would lower the log-likelihood ends the fit at the previous
    parameters, so ``log_likelihood_trace`` never decreases.
    """
    if k <= 0:
        raise InvalidArgumentError(f"k must be positive, got {k}")
    x = np.asarray(pixels, dtype=float).reshape(-1, 3)
    if len(x) < k:
        raise InvalidArgumentError(f"need at least {k} pixels, got {len(x)}")
    if init is not None and init.k == k:
        mix = ColorMixture(init.weights.copy(), init.means.copy(), init.covariances.copy())
    else:
        rng = np.random.default_rng(seed)
        centers = _kmeans_init(x, k, rng)
        assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
        resp = np.zeros((len(x), k))
        resp[np.arange(len(x)), assign] = 1.0
        mix = ColorMixture(*_m_step(x, resp, reg_covar))
    comp = mix.component_log_density(x)
    ll = _mean_logsumexp(comp)
    trace = [ll]
    for _ in range(max_iter):
        top = comp.max(axis=1, keepdims=True)
        resp = np.exp(comp - top)
        resp /= resp.sum(axis=1, keepdims=True)
        cand = ColorMixture(*_m_step(x, resp, reg_covar))
        cand_comp = cand.component_log_density(x)
        cand_ll = _mean_logsumexp(cand_comp)
        if cand_ll < ll:
            break
        mix, comp = cand, cand_comp
        improved = cand_ll - ll
        ll = cand_ll
        trace.append(ll)
        if improved < tol:
            break
    mix.log_likelihood_trace = trace
    return mix


def _mean_logsumexp(comp):
    top = comp.max(axis=1, keepdims=True)
    return float(np.mean(top.ravel() + np.log(np.sum(np.exp(comp - top), axis=1))))
