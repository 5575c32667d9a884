"""Synthetic planted-term slides for offline runs and tests.

A planted slide is built around the mock embedder: each image-evidenceable
gap field gets a few patches whose features are the embedding of the field
name, background patches get embeddings of innocuous tissue phrases, and the
mock describer's lexicon holds both sets of terms. Retrieval queries share
tokens with the planted field names, so the offline loop exercises real
demand-driven retrieval end to end.

``python -m wsireport.synthetic OUTDIR`` writes a ready-to-run workspace
(feature file, tiles, checklist, config, manifest).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clients import MockEmbedder
from .features import FeatureStore, PatchRef, save_store
from .qc import Checklist, FieldCategory, FieldSpec

GRID_COLS = 10
TILE = 224

PLANTED_QUERY_TEMPLATE = "Histopathological evidence for {field} in gastric adenocarcinoma."

BACKGROUND_TERMS = (
    "unremarkable connective stroma",
    "benign oxyntic mucosa",
    "dense fibrous tissue",
)

# draft text covers exactly these four image-related fields
PLANTED_DRAFT = (
    "Moderately differentiated adenocarcinoma infiltrating the muscularis propria. "
    "No tumor necrosis identified."
)

DRAFT_COVERED_FIELDS = ("histologic type", "differentiation", "depth of invasion", "necrosis")
GAP_FIELDS = ("lymphovascular invasion", "perineural invasion", "margins", "lymph nodes")
ADMIN_FIELDS = ("accession data", "clinical history")


def planted_checklist() -> Checklist:
    """Ten fields: eight image-related (four covered by the draft, four
    planted as patches) and two admin-required."""
    specs = [
        FieldSpec("histologic type", FieldCategory.IMAGE_RELATED, ("adenocarcinoma",),
                  PLANTED_QUERY_TEMPLATE),
        FieldSpec("differentiation", FieldCategory.IMAGE_RELATED,
                  ("differentiated", "differentiation"), PLANTED_QUERY_TEMPLATE),
        FieldSpec("depth of invasion", FieldCategory.IMAGE_RELATED,
                  ("muscularis propria", "submucosa", "serosa"), PLANTED_QUERY_TEMPLATE),
        FieldSpec("necrosis", FieldCategory.IMAGE_RELATED, ("necrosis", "necrotic"),
                  PLANTED_QUERY_TEMPLATE),
        FieldSpec("lymphovascular invasion", FieldCategory.IMAGE_RELATED,
                  ("lymphovascular",), PLANTED_QUERY_TEMPLATE),
        FieldSpec("perineural invasion", FieldCategory.IMAGE_RELATED,
                  ("perineural",), PLANTED_QUERY_TEMPLATE),
        FieldSpec("margins", FieldCategory.IMAGE_RELATED, ("margin",),
                  PLANTED_QUERY_TEMPLATE),
        FieldSpec("lymph nodes", FieldCategory.IMAGE_RELATED, ("lymph node",),
                  PLANTED_QUERY_TEMPLATE),
        FieldSpec("accession data", FieldCategory.ADMIN_REQUIRED, ("accession",),
                  PLANTED_QUERY_TEMPLATE),
        FieldSpec("clinical history", FieldCategory.ADMIN_REQUIRED,
                  ("clinical history", "clinical presentation"), PLANTED_QUERY_TEMPLATE),
    ]
    return Checklist(fields=tuple(specs), dataset_context="")


@dataclass
class PlantedSlide:
    slide_id: str
    store: FeatureStore
    checklist: Checklist
    draft: str
    lexicon: tuple[str, ...]
    planted: dict[str, tuple[int, ...]]  # field -> patch indices carrying its term
    dim: int
    embed_seed: int


def build_planted_slide(
    slide_id: str = "slide-planted",
    dim: int = 256,
    embed_seed: int = 0,
    per_field: int = 3,
    n_background: int = 38,
    gap_fields: tuple[str, ...] = GAP_FIELDS,
) -> PlantedSlide:
    """Construct the in-memory planted slide (features + checklist + draft)."""
    checklist = planted_checklist()
    embedder = MockEmbedder(dim=dim, seed=embed_seed)

    feats: list[np.ndarray] = []
    planted: dict[str, tuple[int, ...]] = {}
    for i in range(n_background):
        feats.append(embedder.embed_one(BACKGROUND_TERMS[i % len(BACKGROUND_TERMS)]))
    for field_name in gap_fields:
        vec = embedder.embed_one(field_name)
        indices = []
        for _ in range(per_field):
            indices.append(len(feats))
            feats.append(vec)
        planted[field_name] = tuple(indices)

    coords = tuple(
        PatchRef(i, (i % GRID_COLS) * TILE, (i // GRID_COLS) * TILE)
        for i in range(len(feats))
    )
    store = FeatureStore(slide_id, np.stack(feats), coords, normalized=True)
    lexicon = tuple(f.name for f in checklist.fields
                    if f.category is FieldCategory.IMAGE_RELATED) + BACKGROUND_TERMS
    return PlantedSlide(
        slide_id=slide_id,
        store=store,
        checklist=checklist,
        draft=PLANTED_DRAFT,
        lexicon=lexicon,
        planted=planted,
        dim=dim,
        embed_seed=embed_seed,
    )


def planted_config_dict(slide: PlantedSlide, checklist_path: str, seed: int = 11) -> dict:
    """Pipeline config wired to the slide's mock stack."""
    return {
        "seed": seed,
        "models": {
            "wsi_draft": {"mock": True, "fixtures": {slide.slide_id: slide.draft}},
            "patch_describer": {
                "mock": True,
                "lexicon": list(slide.lexicon),
                "dim": slide.dim,
                "seed": slide.embed_seed,
            },
            "embedder": {"mock": True, "dim": slide.dim, "seed": slide.embed_seed},
            "critic": {"mock": True},
        },
        "sampler": {"k": 1, "per_cluster": 1},
        "retrieval": {"top_k": 3, "dedup": True},
        "loop": {"max_rounds": 3},
        "checklist": checklist_path,
    }


def write_tiles(store: FeatureStore, image_root: Path) -> None:
    """One dummy tile file per patch; content is a stable function of (x, y)."""
    image_root.mkdir(parents=True, exist_ok=True)
    for ref in store.coords:
        (image_root / f"{ref.x}_{ref.y}.png").write_bytes(
            f"tile-{ref.x}-{ref.y}".encode("ascii")
        )


def write_workspace(root: Path, slide: PlantedSlide | None = None, n_slides: int = 1) -> Path:
    """Write a runnable demo workspace: features, tiles, checklist, config,
    manifest. Returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    first = None
    for i in range(n_slides):
        s = slide if (slide is not None and i == 0) else build_planted_slide(
            slide_id=f"slide-{i:03d}"
        )
        first = first or s
        slide_dir = root / s.slide_id
        slide_dir.mkdir(parents=True, exist_ok=True)
        store_path = slide_dir / f"{s.slide_id}.qcf"
        save_store(s.store, store_path, fmt="binary")
        write_tiles(s.store, slide_dir / "tiles")
        entries.append(
            {
                "slide_id": s.slide_id,
                "feature_path": str(store_path),
                "patch_image_root": str(slide_dir / "tiles"),
                "reference_report": None,
            }
        )
    checklist_path = root / "checklist.json"
    checklist_path.write_text(
        json.dumps(first.checklist.to_dict(), indent=2, ensure_ascii=False),
        encoding="utf-8",
    )
    config_path = root / "config.json"
    config_path.write_text(
        json.dumps(planted_config_dict(first, str(checklist_path)), indent=2),
        encoding="utf-8",
    )
    manifest_path = root / "manifest.json"
    manifest_path.write_text(json.dumps({"slides": entries}, indent=2), encoding="utf-8")
    return manifest_path


if __name__ == "__main__":
    import sys

    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-workspace")
    manifest = write_workspace(out)
    print(f"wrote demo workspace under {out}")
    print(f"run: wsireport run --config {out}/config.json --manifest {manifest} --out {out}/runs")
