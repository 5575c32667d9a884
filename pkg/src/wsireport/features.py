"""Per-slide patch feature stores.

A store holds the pre-extracted feature matrix (one row per patch) together
with each patch's slide coordinates. Two interchange formats are supported:

* binary: magic ``QCF1`` | u32-LE N | u32-LE D | N * (i32-LE x, i32-LE y)
  | N*D f32-LE features, row-major;
* jsonl: a header line ``{"slide_id":…, "n":…, "d":…}`` followed by one
  ``{"x":…, "y":…, "feat":[…]}`` object per patch.

Features are held as float64 in memory (exact widening from f32 storage) and
the array is marked read-only: a loaded store is safe to share across threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CountMismatch,
    DimMismatch,
    EmptyStore,
    MagicMismatch,
    ZeroVector,
)

MAGIC = b"QCF1"
_HEADER = struct.Struct("<4sII")
_COORD_DTYPE = np.dtype("<i4")
_FEAT_DTYPE = np.dtype("<f4")

FORMATS = ("binary", "jsonl")


@dataclass(frozen=True)
class PatchRef:
    """Identity and slide-space position of one patch.

    ``patch_index`` is the stable per-slide id; ``(x, y)`` is the patch's
    top-left corner in slide pixels and is metadata, not a key.
    """

    patch_index: int
    x: int
    y: int

    def __post_init__(self):
        if self.patch_index < 0:
            raise ValueError(f"patch_index must be >= 0, got {self.patch_index}")
        if self.x < 0 or self.y < 0:
            raise ValueError(f"patch coordinates must be >= 0, got ({self.x}, {self.y})")

    def to_dict(self) -> dict:
        return {"patch_index": self.patch_index, "x": self.x, "y": self.y}


@dataclass
class FeatureStore:
    """All patch feature vectors and coordinates for one slide.

    Invariants enforced on construction: at least one row, constant positive
    dimension, one coordinate per row, unique patch indices. The feature
    array is made read-only so the store can be shared freely.
    """

    slide_id: str
    features: np.ndarray
    coords: tuple[PatchRef, ...]
    normalized: bool = False

    def __post_init__(self):
        feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        if feats.ndim != 2:
            raise DimMismatch(f"features must be 2-D, got shape {feats.shape}")
        if feats.shape[0] == 0:
            raise EmptyStore("store holds zero patches")
        if feats.shape[1] == 0:
            raise DimMismatch("feature dimension must be positive")
        self.coords = tuple(self.coords)
        if len(self.coords) != feats.shape[0]:
            raise CountMismatch(
                f"{feats.shape[0]} feature rows but {len(self.coords)} coordinates"
            )
        if len({c.patch_index for c in self.coords}) != len(self.coords):
            raise ValueError("patch indices must be unique within a slide")
        feats.setflags(write=False)
        self.features = feats

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def load_store(path: str | Path, fmt: str = "binary") -> FeatureStore:
    """Load and validate a feature store from ``path``.

    N and D are taken from the header, never inferred from content; any
    disagreement between header and payload raises the matching
    ``StoreFormatError`` subclass. The returned store has ``normalized=False``.
    """
    path = Path(path)
    if fmt == "binary":
        return _load_binary(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise ValueError(f"unknown format {fmt!r}, expected one of {FORMATS}")


def save_store(store: FeatureStore, path: str | Path, fmt: str = "binary") -> Path:
    """Write ``store`` to ``path``. Features are stored as little-endian f32."""
    path = Path(path)
    if fmt == "binary":
        _save_binary(store, path)
    elif fmt == "jsonl":
        _save_jsonl(store, path)
    else:
        raise ValueError(f"unknown format {fmt!r}, expected one of {FORMATS}")
    return path


def normalize(store: FeatureStore) -> FeatureStore:
    """Return a store whose rows are unit Euclidean norm.

    Idempotent. Zero-norm rows are a hard error, never silently dropped:
    dropping would desynchronize features from coordinates.
    """
    if store.normalized:
        return store
    norms = np.linalg.norm(store.features, axis=1)
    bad = np.flatnonzero(norms < 1e-12)
    if bad.size:
        raise ZeroVector(int(bad[0]))
    feats = store.features / norms[:, None]
    return FeatureStore(store.slide_id, feats, store.coords, normalized=True)


def _load_binary(path: Path) -> FeatureStore:
    blob = path.read_bytes()
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise MagicMismatch(f"{path}: bad magic, expected {MAGIC!r}")
    _, n, d = _HEADER.unpack_from(blob, 0)
    if n == 0:
        raise EmptyStore(f"{path}: header declares N=0")
    if d == 0:
        raise DimMismatch(f"{path}: header declares D=0")
    expected = _HEADER.size + n * 2 * 4 + n * d * 4
    if len(blob) != expected:
        raise CountMismatch(
            f"{path}: payload holds {len(blob)} bytes, header implies {expected}"
        )
    off = _HEADER.size
    xy = np.frombuffer(blob, dtype=_COORD_DTYPE, count=2 * n, offset=off).reshape(n, 2)
    off += n * 2 * 4
    feats = np.frombuffer(blob, dtype=_FEAT_DTYPE, count=n * d, offset=off).reshape(n, d)
    coords = tuple(PatchRef(i, int(x), int(y)) for i, (x, y) in enumerate(xy))
    return FeatureStore(path.stem, feats, coords)


def _save_binary(store: FeatureStore, path: Path) -> None:
    parts = [_HEADER.pack(MAGIC, store.count, store.dim)]
    xy = np.array([[c.x, c.y] for c in store.coords], dtype=_COORD_DTYPE)
    parts.append(xy.tobytes())
    parts.append(store.features.astype(_FEAT_DTYPE).tobytes())
    path.write_bytes(b"".join(parts))


def _load_jsonl(path: Path) -> FeatureStore:
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line)
            slide_id = header["slide_id"]
            n, d = int(header["n"]), int(header["d"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise MagicMismatch(f"{path}: bad JSONL header line: {exc}") from exc
        if n == 0:
            raise EmptyStore(f"{path}: header declares n=0")
        if d == 0:
            raise DimMismatch(f"{path}: header declares d=0")
        feats = np.empty((n, d), dtype=np.float64)
        coords = []
        rows = 0
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if rows >= n:
                raise CountMismatch(f"{path}: more rows than header n={n}")
            row = json.loads(line)
            feat = row["feat"]
            if len(feat) != d:
                raise DimMismatch(
                    f"{path}: row {rows} has {len(feat)} values, header d={d}"
                )
            feats[rows] = feat
            coords.append(PatchRef(rows, int(row["x"]), int(row["y"])))
            rows += 1
    if rows != n:
        raise CountMismatch(f"{path}: {rows} rows, header n={n}")
    return FeatureStore(slide_id, feats, tuple(coords))


def _save_jsonl(store: FeatureStore, path: Path) -> None:
    with path.open("w", encoding="utf-8") as fh:
        header = {"slide_id": store.slide_id, "n": store.count, "d": store.dim}
        fh.write(json.dumps(header) + "\n")
        f32 = store.features.astype(_FEAT_DTYPE)
        for ref, row in zip(store.coords, f32):
            obj = {"x": ref.x, "y": ref.y, "feat": [float(v) for v in row]}
            fh.write(json.dumps(obj) + "\n")


@dataclass
class PatchImageSource:
    """Directory of pre-tiled patch images keyed by slide coordinates.

    ``pattern`` maps ``(x, y)`` to a file name under ``root``; a coordinate
    resolves to exactly one path, and a missing file is a defined miss
    surfaced by the caller (see retrieval.crop_patches).
    """

    root: Path
    tile_size: int = 224
    pattern: str = "{x}_{y}.png"

    def __post_init__(self):
        self.root = Path(self.root)

    def tile_path(self, x: int, y: int) -> Path:
        return self.root / self.pattern.format(x=x, y=y)

    def load_tile(self, x: int, y: int) -> bytes:
        """Read one tile's bytes; raises FileNotFoundError on a miss."""
        return self.tile_path(x, y).read_bytes()
