"""Quality-controlled report generation from whole-slide patch features.

The pipeline drafts a slide-level report, extracts coverage-oriented patch
evidence, then iterates audit -> retrieve -> describe -> revise rounds until
the checklist is satisfied, only non-image-evidenceable gaps remain, or the
round budget is exhausted. Every run leaves a replayable JSONL trace.
"""

__version__ = "0.1.0"

from .features import FeatureStore, PatchImageSource, PatchRef, load_store, normalize, save_store
from .qc import Checklist, FieldSpec, SourceRank, StructuredReport
from .pipeline import TerminationReason, qc_iterate

__all__ = [
    "Checklist",
    "FeatureStore",
    "FieldSpec",
    "PatchImageSource",
    "PatchRef",
    "SourceRank",
    "StructuredReport",
    "TerminationReason",
    "load_store",
    "normalize",
    "qc_iterate",
    "save_store",
    "__version__",
]
