# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Native implementations of the hot kernels.

Kept in lockstep with ``_fallback``: identical tie rules and output dtypes,
float64 accumulation throughout.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def topk_dot(const double[:, ::1] feats, const double[::1] query, Py_ssize_t k,
             const unsigned char[::1] excluded):
    """Single-pass exact top-k scan with a small insertion buffer.

    Order: descending score, ties by ascending row index. Returns
    (indices int64, scores float64), at most k entries.
    """
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t d = feats.shape[1]
    if k <= 0:
        raise ValueError("k must be >= 1")

    cdef cnp.ndarray[cnp.int64_t, ndim=1] best_idx = np.empty(k, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] best_s = np.empty(k, dtype=np.float64)
    cdef cnp.int64_t[::1] bi = best_idx
    cdef double[::1] bs = best_s

    cdef Py_ssize_t m = 0  # filled entries
    cdef Py_ssize_t i, j, p
    cdef double s

    for i in range(n):
        if excluded[i]:
            continue
        s = 0.0
        for j in range(d):
            s += feats[i, j] * query[j]
        if m == k:
            # worst kept entry is at position m-1
            if s < bs[m - 1] or (s == bs[m - 1] and i > bi[m - 1]):
                continue
            m -= 1
        # insertion sort from the back; i is larger than every kept index,
        # so on equal scores the new entry goes after the existing one
        p = m
        while p > 0 and bs[p - 1] < s:
            bs[p] = bs[p - 1]
            bi[p] = bi[p - 1]
            p -= 1
        bs[p] = s
        bi[p] = i
        m += 1

    return best_idx[:m].copy(), best_s[:m].copy()


def lloyd_step(const double[:, ::1] x, const double[:, ::1] centroids):
    """One Lloyd iteration; see _fallback.lloyd_step for the contract."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t k = centroids.shape[0]

    cdef cnp.ndarray[cnp.int64_t, ndim=1] assign = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] sums = np.zeros((k, d), dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(k, dtype=np.int64)
    cdef cnp.int64_t[::1] av = assign
    cdef double[:, ::1] sv = sums
    cdef cnp.int64_t[::1] cv = counts

    cdef double inertia = 0.0
    cdef Py_ssize_t i, j, t, best
    cdef double dist, diff, best_dist

    for i in range(n):
        best = 0
        best_dist = 0.0
        for j in range(k):
            dist = 0.0
            for t in range(d):
                diff = x[i, t] - centroids[j, t]
                dist += diff * diff
            if j == 0 or dist < best_dist:  # strict < keeps the lowest index on ties
                best_dist = dist
                best = j
        av[i] = best
        inertia += best_dist
        cv[best] += 1
        for t in range(d):
            sv[best, t] += x[i, t]

    new_centroids = np.asarray(centroids).copy()
    for j in range(k):
        if counts[j] > 0:
            new_centroids[j] = sums[j] / counts[j]
    return assign, new_centroids, inertia, counts
