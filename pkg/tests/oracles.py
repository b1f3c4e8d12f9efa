"""Independent reference computations shared by the tests."""
import itertools

import numpy as np


def brute_force_min_energy(unary, edges, weights):
    """Minimum labelling energy by enumerating all 2^N labellings."""
    n = len(unary)
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n):
        lab = np.array(bits)
        e = unary[np.arange(n), lab].sum()
        if len(edges):
            e += weights[lab[edges[:, 0]] != lab[edges[:, 1]]].sum()
        best = min(best, e)
    return best


def random_energy(rng, max_nodes=16):
    n = int(rng.integers(1, max_nodes + 1))
    unary = rng.uniform(0, 10, (n, 2))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    k = int(rng.integers(0, min(len(pairs), 3 * n) + 1))
    idx = rng.choice(len(pairs), size=k, replace=False) if k else np.zeros(0, int)
    edges = np.array([pairs[i] for i in idx], dtype=np.int64).reshape(-1, 2)
    weights = rng.uniform(0, 5, len(edges))
    return unary, edges, weights


def kde_count_oracle(samples, query, h):
    """count{D <= h} / (2 N h) with an explicit loop over samples."""
    qx0, qy0, qx1, qy1 = query
    count = 0
    for sx0, sy0, sx1, sy1 in samples:
        iw = min(qx1, sx1) - max(qx0, sx0)
        ih = min(qy1, sy1) - max(qy0, sy0)
        inter = iw * ih if iw > 0 and ih > 0 else 0.0
        union = (qx1 - qx0) * (qy1 - qy0) + (sx1 - sx0) * (sy1 - sy0) - inter
        d = 1.0 - (1.0 if (qx0, qy0, qx1, qy1) == (sx0, sy0, sx1, sy1) else inter / union)
        if d <= h:
            count += 1
    return count / (2 * len(samples) * h)


def random_box(rng, lo=0.0, hi=100.0, min_side=1.0, max_side=40.0):
    x, y = rng.uniform(lo, hi - max_side, 2)
    w, h = rng.uniform(min_side, max_side, 2)
    return (float(x), float(y), float(x + w), float(y + h))
