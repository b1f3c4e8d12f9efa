"""Exact minimisation of submodular binary energies by s-t min-cut.

The energy is ``sum_i U[i, l_i] + sum_(i,j) w_ij * [l_i != l_j]`` with
``w_ij >= 0``.  Max-flow uses Dinic's algorithm on float capacities,
compiled with numba.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import InvalidArgumentError


@dataclass
class Segmentation:
    labels: np.ndarray  # 1 = foreground / source side
    energy: float


@numba.njit(cache=True)
def _dinic(n, s, t, start, tail, to, cap, rev, eps):
    level = np.empty(n, np.int64)
    ptr = np.empty(n, np.int64)
    queue = np.empty(n, np.int64)
    path = np.empty(n, np.int64)
    total = 0.0
    while True:
        level[:] = -1
        level[s] = 0
        head = 0
        qlen = 1
        queue[0] = s
        while head < qlen:
            u = queue[head]
            head += 1
            for e in range(start[u], start[u + 1]):
                v = to[e]
                if level[v] < 0 and cap[e] > eps:
                    level[v] = level[u] + 1
                    queue[qlen] = v
                    qlen += 1
        if level[t] < 0:
            break
        for u in range(n):
            ptr[u] = start[u]
        top = 0
        u = s
        while True:
            if u == t:
                f = cap[path[0]]
                for k in range(1, top):
                    if cap[path[k]] < f:
                        f = cap[path[k]]
                for k in range(top):
                    e = path[k]
                    cap[e] -= f
                    cap[rev[e]] += f
                total += f
                top = 0
                u = s
                continue
            advanced = False
            while ptr[u] < start[u + 1]:
                e = ptr[u]
                v = to[e]
                if cap[e] > eps and level[v] == level[u] + 1:
                    path[top] = e
                    top += 1
                    u = v
                    advanced = True
                    break
                ptr[u] += 1
            if not advanced:
                if u == s:
                    break
                level[u] = -1
                top -= 1
                u = tail[path[top]]
                ptr[u] += 1
    # source side of the residual graph
    side = np.zeros(n, np.bool_)
    side[s] = True
    head = 0
    qlen = 1
    queue[0] = s
    while head < qlen:
        u = queue[head]
        head += 1
        for e in range(start[u], start[u + 1]):
            v = to[e]
            if not side[v] and cap[e] > eps:
                side[v] = True
                queue[qlen] = v
                qlen += 1
    return total, side


def labeling_energy(unary: np.ndarray, edges: np.ndarray, weights: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels).astype(np.int64).ravel()
    u = float(np.sum(unary[np.arange(len(labels)), labels]))
    if len(edges) == 0:
        return u
    cut = labels[edges[:, 0]] != labels[edges[:, 1]]
    return u + float(np.sum(weights[cut]))


def min_cut_labeling(unary, edges, weights) -> Segmentation:
    """Globally optimal binary labelling.

    Args:
        unary: ``(N, 2)`` costs of label 0 and label 1 per node.
        edges: ``(E, 2)`` node index pairs.
        weights: ``(E,)`` non-negative disagreement costs.
    """
    unary = np.asarray(unary, dtype=float)
    if unary.ndim != 2 or unary.shape[1] != 2:
        raise InvalidArgumentError(f"unary costs must be (N, 2), got {unary.shape}")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float).ravel()
    if len(weights) != len(edges):
        raise InvalidArgumentError("edges and weights differ in length")
    if np.any(weights < 0):
        raise InvalidArgumentError("pairwise costs must be non-negative")
    if not (np.all(np.isfinite(unary)) and np.all(np.isfinite(weights))):
        raise InvalidArgumentError("costs must be finite")
    n = len(unary)
    if n == 0:
        return Segmentation(np.zeros(0, dtype=np.uint8), 0.0)

    base = unary.min(axis=1)
    src_cap = unary[:, 0] - base  # paid when the node ends on the sink side
    snk_cap = unary[:, 1] - base  # paid when the node ends on the source side
    s, t = n, n + 1
    nodes = np.arange(n, dtype=np.int64)
    keep = weights > 0
    ei, ej, ew = edges[keep, 0], edges[keep, 1], weights[keep]
    # each arc is paired with its reverse arc at index ^ 1
    tails = np.concatenate([np.stack([np.full(n, s), nodes], 1).ravel(),
                            np.stack([nodes, np.full(n, t)], 1).ravel(),
                            np.stack([ei, ej], 1).ravel()])
    heads = np.concatenate([np.stack([nodes, np.full(n, s)], 1).ravel(),
                            np.stack([np.full(n, t), nodes], 1).ravel(),
                            np.stack([ej, ei], 1).ravel()])
    caps = np.concatenate([np.stack([src_cap, np.zeros(n)], 1).ravel(),
                           np.stack([snk_cap, np.zeros(n)], 1).ravel(),
                           np.stack([ew, ew], 1).ravel()])
    m = len(tails)
    pair = np.arange(m, dtype=np.int64) ^ 1
    order = np.argsort(tails, kind="stable")
    pos = np.empty(m, dtype=np.int64)
    pos[order] = np.arange(m)
    tail_s = tails[order]
    to_s = heads[order]
    cap_s = caps[order].astype(np.float64)
    rev_s = pos[pair[order]]
    start = np.searchsorted(tail_s, np.arange(n + 3)).astype(np.int64)
    scale = max(float(cap_s.max()) if m else 0.0, 1.0)
    _, side = _dinic(n + 2, s, t, start, tail_s, to_s, cap_s, rev_s, 1e-12 * scale)
    labels = side[:n].astype(np.uint8)
    return Segmentation(labels, labeling_energy(unary, edges, weights, labels))


def grid_edges(height: int, width: int) -> np.ndarray:
    """4-connected neighbour pairs of a row-major ``height x width`` grid."""
    idx = np.arange(height * width).reshape(height, width)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], 1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], 1)
    return np.concatenate([horiz, vert]).astype(np.int64)
