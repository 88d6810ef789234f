"""Independent reference implementations used only by the tests.

They are written from the metric definitions directly, sharing no code with
the package.
"""

from __future__ import annotations

import math

import numpy as np


def brute_recall(rec, truth, k=10):
    top = []
    for item in rec[:k]:
        if item not in top:
            top.append(item)
    uniq_truth = []
    for t in truth:
        if t not in uniq_truth:
            uniq_truth.append(t)
    if not uniq_truth:
        return 0.0
    hits = 0
    for item in top:
        if item in uniq_truth:
            hits += 1
    return hits / len(uniq_truth)


def brute_ndcg(rec, truth, k=10):
    truth = list(dict.fromkeys(truth))
    if not truth:
        return 0.0
    dcg = 0.0
    for pos in range(1, min(k, len(rec)) + 1):
        if rec[pos - 1] in truth:
            dcg += 1.0 / (math.log(pos + 1) / math.log(2))
    ideal = 0.0
    for pos in range(1, min(k, len(truth)) + 1):
        ideal += 1.0 / (math.log(pos + 1) / math.log(2))
    return dcg / ideal


def brute_cov(rec, genre_of, k=10):
    seen = {}
    for item in rec[:k]:
        seen[genre_of[item]] = True
    return len(seen)


def levenshtein(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def direct_sq_distances(vectors: np.ndarray, query: np.ndarray, block: int = 512) -> np.ndarray:
    # sum of squared differences, in cache-sized row blocks
    out = np.empty(len(vectors))
    for start in range(0, len(vectors), block):
        diff = vectors[start : start + block] - query
        out[start : start + block] = np.einsum("ij,ij->i", diff, diff)
    return out


def brute_nearest(vectors: np.ndarray, query: np.ndarray, exclude=(), tie_eps: float = 1e-9) -> int:
    """Lowest row whose squared distance (direct differences) is within ``tie_eps`` of the minimum."""
    sq = direct_sq_distances(vectors, query)
    allowed = np.ones(len(sq), dtype=bool)
    allowed[list(exclude)] = False
    if not allowed.any():
        raise ValueError("every row is excluded")
    best = sq[allowed].min()
    return int(np.flatnonzero(allowed & (sq <= best + tie_eps))[0])


def brute_rank(vectors: np.ndarray, query: np.ndarray, row: int, exclude, tie_eps: float = 1e-9) -> int:
    """1 + number of excluded rows that beat ``row`` (closer, or tied with a lower index)."""
    sq = direct_sq_distances(vectors, query)
    ahead = [r for r in exclude if sq[r] < sq[row] - tie_eps or (abs(sq[r] - sq[row]) <= tie_eps and r < row)]
    return 1 + len(ahead)
