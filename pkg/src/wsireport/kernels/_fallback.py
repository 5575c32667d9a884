"""Pure-numpy implementations of the hot kernels.

Semantics must match ``_native`` exactly: same tie rules, same outputs.
Scores and distances are accumulated in float64 in both backends.
"""

from __future__ import annotations

import numpy as np


def topk_dot(feats: np.ndarray, query: np.ndarray, k: int, excluded: np.ndarray):
    """Exact top-k inner products of ``query`` against rows of ``feats``.

    ``excluded`` is a uint8 mask of rows to skip. Results are ordered by
    descending score, ties broken by ascending row index. Returns
    ``(indices int64, scores float64)`` with at most ``k`` entries.
    """
    pool = np.flatnonzero(excluded == 0)
    if pool.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    scores = feats[pool] @ query
    order = np.lexsort((pool, -scores))[:k]
    return pool[order].astype(np.int64), scores[order].astype(np.float64)


def lloyd_step(x: np.ndarray, centroids: np.ndarray):
    """One Lloyd iteration: assign to nearest centroid, then recompute means.

    Ties in the assignment go to the lowest centroid index. Empty clusters
    keep their previous centroid (never NaN). Returns
    ``(assignments int64, new_centroids float64, inertia float, counts int64)``
    where inertia is the sum of squared distances to the *assigned* centroid
    under the input ``centroids``.
    """
    k = centroids.shape[0]
    x2 = np.einsum("ij,ij->i", x, x)
    c2 = np.einsum("ij,ij->i", centroids, centroids)
    d2 = x2[:, None] + c2[None, :] - 2.0 * (x @ centroids.T)
    np.maximum(d2, 0.0, out=d2)
    assign = np.argmin(d2, axis=1).astype(np.int64)  # argmin = lowest index on ties
    inertia = float(d2[np.arange(x.shape[0]), assign].sum())
    counts = np.bincount(assign, minlength=k).astype(np.int64)
    new_centroids = centroids.copy()
    for j in np.flatnonzero(counts > 0):
        new_centroids[j] = x[assign == j].mean(axis=0)
    return assign, new_centroids, inertia, counts
