"""Demand-driven text-to-patch retrieval.

An exact flat inner-product index over unit-norm patch features: a query
embedding is scanned against every row, already-retrieved patches are
filtered out *before* truncation to top-k, and the surviving coordinates are
handed to the tile source for cropping. Exactness keeps the brute-force
oracle test trivial and results reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import BadQueryNorm, UnnormalizedStore
from .features import FeatureStore, PatchImageSource, PatchRef

QUERY_NORM_TOL = 1e-6
SCORE_TOL = 1e-6


@dataclass(frozen=True)
class RetrievalQuery:
    """One morphology-oriented query spawned by a missing report field."""

    text: str
    round_index: int
    field_name: str

    def __post_init__(self):
        if not self.text:
            raise ValueError("query text must be non-empty")
        if self.round_index < 1:
            raise ValueError("queries only exist in rounds >= 1")


@dataclass(frozen=True)
class RetrievalHit:
    """A retrieved patch with its cosine score and originating query."""

    patch: PatchRef
    score: float
    query_text: str = ""
    round_index: int = 0

    def __post_init__(self):
        if not (-1.0 - SCORE_TOL <= self.score <= 1.0 + SCORE_TOL):
            raise ValueError(f"cosine score {self.score} outside [-1, 1]")

    def to_dict(self) -> dict:
        return {
            "patch_index": self.patch.patch_index,
            "x": self.patch.x,
            "y": self.patch.y,
            "score": self.score,
            "query_text": self.query_text,
            "round": self.round_index,
        }


@dataclass(frozen=True)
class TileMissing:
    """A hit whose (x, y) tile file does not exist; collected, never raised."""

    x: int
    y: int
    patch_index: int


class ExclusionLedger:
    """Monotone set of patch indices already retrieved across rounds."""

    def __init__(self, seen=()):
        self._seen: set[int] = set(int(i) for i in seen)

    @property
    def seen(self) -> frozenset[int]:
        return frozenset(self._seen)

    def __contains__(self, patch_index: int) -> bool:
        return patch_index in self._seen

    def __len__(self) -> int:
        return len(self._seen)

    def add(self, indices) -> None:
        self._seen.update(int(i) for i in indices)

    def copy(self) -> "ExclusionLedger":
        return ExclusionLedger(self._seen)


class SearchIndex:
    """Immutable exact inner-product index over one normalized store."""

    def __init__(self, store: FeatureStore):
        if not store.normalized:
            raise UnnormalizedStore(
                "search requires unit-norm rows; call features.normalize first"
            )
        self._features = store.features
        self._coords = store.coords

    @property
    def size(self) -> int:
        return self._features.shape[0]

    @property
    def dim(self) -> int:
        return self._features.shape[1]

    def coord(self, patch_index: int) -> PatchRef:
        return self._coords[patch_index]


def build_index(store: FeatureStore) -> SearchIndex:
    """Wrap a normalized store in an exact search index."""
    return SearchIndex(store)


def search_topk(
    index: SearchIndex,
    query_embedding: np.ndarray,
    k: int,
    ledger: ExclusionLedger | None = None,
    query_text: str = "",
    round_index: int = 0,
) -> list[RetrievalHit]:
    """Exact top-k by inner product, excluding ledgered patches pre-truncation.

    Hits come back sorted by descending score, ties broken by ascending patch
    index; fewer than k hits are returned when the un-excluded pool is
    smaller. The ledger is read, never mutated (see commit_hits).
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.ascontiguousarray(np.asarray(query_embedding, dtype=np.float64))
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise BadQueryNorm(f"query must be a 1-D vector of dim {index.dim}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > QUERY_NORM_TOL:
        raise BadQueryNorm(f"query norm {norm} not within {QUERY_NORM_TOL} of 1")

    excluded = np.zeros(index.size, dtype=np.uint8)
    if ledger is not None:
        for i in ledger.seen:
            if 0 <= i < index.size:
                excluded[i] = 1
    idx, scores = kernels.topk_dot(index._features, q, k, excluded)
    return [
        RetrievalHit(
            patch=index.coord(int(i)),
            score=float(s),
            query_text=query_text,
            round_index=round_index,
        )
        for i, s in zip(idx, scores)
    ]


def commit_hits(ledger: ExclusionLedger, hits: list[RetrievalHit]) -> ExclusionLedger:
    """Record hit indices into the ledger; idempotent for repeated commits."""
    ledger.add(h.patch.patch_index for h in hits)
    return ledger


def crop_patches(
    source: PatchImageSource, hits: list[RetrievalHit]
) -> tuple[list[tuple[RetrievalHit, bytes]], list[TileMissing]]:
    """Pair each hit with its tile bytes.

    Misses are collected per hit and do not abort the batch: a hole in the
    tile directory must not lose the other patches' evidence.
    """
    crops: list[tuple[RetrievalHit, bytes]] = []
    misses: list[TileMissing] = []
    for hit in hits:
        try:
            data = source.load_tile(hit.patch.x, hit.patch.y)
        except FileNotFoundError:
            misses.append(TileMissing(hit.patch.x, hit.patch.y, hit.patch.patch_index))
            continue
        crops.append((hit, data))
    return crops, misses
