"""Reference computations that share no code with the package under test."""

from __future__ import annotations

import itertools

import mpmath
import numpy as np

mpmath.mp.dps = 50


def mp_softmax(row):
    xs = [mpmath.mpf(float(v)) for v in row]
    m = max(xs)
    es = [mpmath.exp(x - m) for x in xs]
    z = mpmath.fsum(es)
    return [float(e / z) for e in es]


def mp_log_softmax_at(row, index):
    xs = [mpmath.mpf(float(v)) for v in row]
    lse = mpmath.log(mpmath.fsum(mpmath.exp(x) for x in xs))
    return float(xs[index] - lse)


def mp_nce(positive, negatives):
    return -mp_log_softmax_at([positive, *negatives], 0)


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Plain-numpy central differences of a float-valued function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


# Central differences at h=1e-5 carry roundoff near eps*|f|/h, about 1e-10 for
# losses of order 10. Components smaller than this floor are compared on an
# absolute scale instead, so the check stays meaningful without chasing noise.
FD_FLOOR = 1e-4


def rel_err(a, b, floor: float = FD_FLOOR) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def brute_force_ranks_desc(scores):
    """Rank by counting strictly better entries, ties to the lower index."""
    n = len(scores)
    return [
        1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
        for i in range(n)
    ]


def all_permutation_mrr(m: int) -> float:
    """E[1/rank] of a single relevant item by enumerating every permutation (small m)."""
    total = 0.0
    count = 0
    for perm in itertools.permutations(range(m)):
        total += 1.0 / (perm.index(0) + 1)
        count += 1
    return total / count
