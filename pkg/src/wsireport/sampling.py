"""Coverage-oriented patch selection.

Clusters patch features with seeded k-means++ / Lloyd iterations, then draws
uniformly without replacement from every non-empty cluster. The resulting
sample is the evidence set for the first report round; demand-driven
retrieval takes over in later rounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import KTooLarge
from .features import FeatureStore

logger = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_PER_CLUSTER = 2
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-6


@dataclass
class ClusterModel:
    """Fitted k-means state over one slide's features.

    ``assignments[i]`` is the nearest centroid of row i (ties to the lowest
    centroid index); ``inertia_history`` records the sum of squared distances
    after each assignment step and is non-increasing. Empty clusters keep
    their last centroid and are listed in ``empty_clusters``.
    """

    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    inertia: float
    seed: int
    inertia_history: list[float] = field(default_factory=list)
    empty_clusters: tuple[int, ...] = ()
    iterations: int = 0

    def members(self, cluster: int) -> np.ndarray:
        """Row indices assigned to ``cluster``, ascending."""
        return np.flatnonzero(self.assignments == cluster)


@dataclass
class SampleSet:
    """Distinct patch indices drawn per cluster, plus the draw bookkeeping."""

    patch_indices: tuple[int, ...]
    per_cluster_counts: dict[int, int]
    seed: int


def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ initialization (D^2 weighting).

    Degenerate inputs (zero total distance mass, e.g. all rows identical)
    duplicate the first centroid rather than sampling from an undefined
    distribution; Lloyd then flags the surplus clusters as empty.
    """
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = x[first]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            logger.warning("degenerate input: duplicate rows force duplicate seeds")
            centroids[j:] = centroids[0]
            break
        probs = closest / total
        nxt = int(rng.choice(n, p=probs))
        centroids[j] = x[nxt]
        np.minimum(closest, ((x - centroids[j]) ** 2).sum(axis=1), out=closest)
    return centroids


def kmeans_fit(
    store: FeatureStore,
    k: int = DEFAULT_K,
    seed: int = 0,
    max_iters: int = DEFAULT_MAX_ITERS,
    tol: float = DEFAULT_TOL,
) -> ClusterModel:
    """Fit k-means on the store's rows as given (raw or unit-norm).

    Lloyd iterations run until the largest centroid shift drops below ``tol``
    or ``max_iters`` is reached; a final assignment pass against the settled
    centroids guarantees every assignment is nearest-centroid optimal.
    Deterministic for a fixed seed.
    """
    x = store.features
    n = x.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise KTooLarge(f"k={k} exceeds patch count N={n}")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(x, k, rng)

    history: list[float] = []
    iterations = 0
    for _ in range(max_iters):
        _, new_centroids, inertia, _ = kernels.lloyd_step(x, centroids)
        history.append(float(inertia))
        iterations += 1
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break

    # final pass: assignments consistent with the returned centroids
    assignments, _, inertia, counts = kernels.lloyd_step(x, centroids)
    history.append(float(inertia))
    empty = tuple(int(j) for j in np.flatnonzero(counts == 0))
    if empty:
        logger.warning("clusters %s are empty (kept last centroid)", empty)
    return ClusterModel(
        k=k,
        centroids=centroids,
        assignments=assignments,
        inertia=float(inertia),
        seed=seed,
        inertia_history=history,
        empty_clusters=empty,
        iterations=iterations,
    )


def cluster_sample(model: ClusterModel, per_cluster: int = DEFAULT_PER_CLUSTER, seed: int = 0) -> SampleSet:
    """Draw min(per_cluster, size) members uniformly from each non-empty cluster.

    Draws are made with a seeded generator, clusters visited in ascending
    index order, and the output is sorted by (cluster index, patch index),
    so (model, per_cluster, seed) fully determines the sample.
    """
    if per_cluster < 1:
        raise ValueError(f"per_cluster must be >= 1, got {per_cluster}")
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    per_counts: dict[int, int] = {}
    for cluster in range(model.k):
        members = model.members(cluster)
        if members.size == 0:
            continue
        take = min(per_cluster, members.size)
        picked = rng.choice(members, size=take, replace=False)
        picked.sort()
        chosen.extend(int(i) for i in picked)
        per_counts[cluster] = take
    return SampleSet(patch_indices=tuple(chosen), per_cluster_counts=per_counts, seed=seed)
