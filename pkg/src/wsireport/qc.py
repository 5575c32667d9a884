"""Checklist-driven quality control over structured reports.

The engine is deliberately mechanical: field coverage is decided by
case-insensitive pattern matching (substrings, or regexes via a ``re:``
prefix), conflicting candidate values are resolved by a fixed source
priority, and every unverifiable gap is ledgered rather than filled. A
negated finding ("no tumor necrosis identified") counts as covered: the
field was addressed, completeness does not require a positive call.

Three rules are enforced here, not prompted for:

* no fabrication - a field with no grounded candidate stays undetermined
  and is logged under ``need_more_info``;
* evidence priority - SUPPLEMENT_EVIDENCE beats DATASET_CONTEXT beats
  WSI_REPORT when values conflict, and losers are recorded, never dropped
  silently;
* field classification - only image-evidenceable fields may spawn retrieval
  queries; administrative fields never do.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path

from .errors import SchemaViolation, Unparseable
from .retrieval import RetrievalQuery

logger = logging.getLogger(__name__)

NEED_MORE_INFO_REASON = "non-image-evidenceable"
INITIAL_DRAFT_REF = "initial-draft"
_SEGMENT_SPLIT = re.compile(r"[.;\n。；]+")


class FieldCategory(str, Enum):
    IMAGE_RELATED = "image_related"
    ADMIN_REQUIRED = "admin_required"


class SourceRank(IntEnum):
    """Fusion priority; lower value wins."""

    SUPPLEMENT_EVIDENCE = 0
    DATASET_CONTEXT = 1
    WSI_REPORT = 2


class ReportStatus(str, Enum):
    FILLED = "filled"
    UNDETERMINED = "undetermined"


@dataclass(frozen=True)
class FieldSpec:
    """One required report field with its match patterns and query template.

    Patterns are case-insensitive substrings; a pattern starting with ``re:``
    is compiled as a regular expression instead. ``query_template`` may use
    ``{field}`` and ``{context}`` slots.
    """

    name: str
    category: FieldCategory
    patterns: tuple[str, ...]
    query_template: str = "Histopathological evidence for {field}. Context: {context}"

    def __post_init__(self):
        if not self.patterns:
            raise ValueError(f"field {self.name!r} has no patterns")
        object.__setattr__(self, "category", FieldCategory(self.category))
        object.__setattr__(self, "patterns", tuple(self.patterns))
        compiled = []
        for pat in self.patterns:
            if pat.startswith("re:"):
                compiled.append(re.compile(pat[3:], re.IGNORECASE))
            else:
                compiled.append(None)
        object.__setattr__(self, "_compiled", tuple(compiled))

    def matches(self, text: str) -> bool:
        if not text:
            return False
        lowered = text.lower()
        for pat, rx in zip(self.patterns, self._compiled):
            if rx is not None:
                if rx.search(text):
                    return True
            elif pat.lower() in lowered:
                return True
        return False

    def render_query(self, context: str) -> str:
        return self.query_template.format(field=self.name, context=context)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "category": self.category.value,
            "patterns": list(self.patterns),
            "query_template": self.query_template,
        }


@dataclass(frozen=True)
class Checklist:
    """The user-defined quality criteria: fields, categories, query templates."""

    fields: tuple[FieldSpec, ...]
    dataset_context: str = ""

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("checklist field names must be unique")

    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def get(self, name: str) -> FieldSpec | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def image_related(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields if f.category is FieldCategory.IMAGE_RELATED)

    @classmethod
    def from_dict(cls, raw: dict) -> "Checklist":
        fields = tuple(
            FieldSpec(
                name=f["name"],
                category=FieldCategory(f["category"]),
                patterns=tuple(f["patterns"]),
                query_template=f.get(
                    "query_template",
                    FieldSpec.__dataclass_fields__["query_template"].default,
                ),
            )
            for f in raw["fields"]
        )
        return cls(fields=fields, dataset_context=raw.get("dataset_context", ""))

    @classmethod
    def from_file(cls, path: str | Path) -> "Checklist":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return {
            "dataset_context": self.dataset_context,
            "fields": [f.to_dict() for f in self.fields],
        }


@dataclass(frozen=True)
class EvidenceRef:
    """Provenance of one filled value: a patch at a round, or the initial draft."""

    kind: str  # "patch" | "initial-draft"
    round_index: int
    patch_index: int | None = None

    def to_dict(self) -> dict:
        if self.kind == "patch":
            return {"kind": "patch", "patch_index": self.patch_index, "round": self.round_index}
        return {"kind": INITIAL_DRAFT_REF, "round": self.round_index}

    @classmethod
    def from_dict(cls, raw: dict) -> "EvidenceRef":
        if raw.get("kind") == "patch":
            return cls("patch", int(raw["round"]), int(raw["patch_index"]))
        return cls(INITIAL_DRAFT_REF, int(raw["round"]))


def draft_ref(round_index: int = 0) -> EvidenceRef:
    return EvidenceRef(INITIAL_DRAFT_REF, round_index)


def patch_ref(patch_index: int, round_index: int) -> EvidenceRef:
    return EvidenceRef("patch", round_index, patch_index)


@dataclass
class FieldEntry:
    """State of one checklist field inside a report."""

    name: str
    category: FieldCategory
    value: str = ""
    status: ReportStatus = ReportStatus.UNDETERMINED
    evidence_refs: tuple[EvidenceRef, ...] = ()
    source: SourceRank | None = None

    def filled(self) -> bool:
        return self.status is ReportStatus.FILLED

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "status": self.status.value,
            "evidence_refs": [r.to_dict() for r in self.evidence_refs],
            "source": self.source.name if self.source is not None else None,
            "category": self.category.value,
        }


@dataclass
class StructuredReport:
    """Field -> (value, status, evidence, source) map plus the running narrative.

    The narrative is the draft-derived free text used as audit substrate;
    presentation goes through render_narrative instead.
    """

    slide_id: str
    entries: dict[str, FieldEntry]
    free_narrative: str = ""

    def entry(self, name: str) -> FieldEntry:
        return self.entries[name]

    def filled_values(self) -> list[str]:
        return [e.value for e in self.entries.values() if e.filled()]

    def copy(self) -> "StructuredReport":
        return StructuredReport(
            slide_id=self.slide_id,
            entries={n: replace(e) for n, e in self.entries.items()},
            free_narrative=self.free_narrative,
        )

    def to_dict(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "fields": {n: e.to_dict() for n, e in self.entries.items()},
            "free_narrative": self.free_narrative,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "StructuredReport":
        entries = {}
        for name, e in raw["fields"].items():
            entries[name] = FieldEntry(
                name=name,
                category=FieldCategory(e["category"]),
                value=e["value"],
                status=ReportStatus(e["status"]),
                evidence_refs=tuple(EvidenceRef.from_dict(r) for r in e["evidence_refs"]),
                source=SourceRank[e["source"]] if e["source"] else None,
            )
        return cls(
            slide_id=raw["slide_id"],
            entries=entries,
            free_narrative=raw["free_narrative"],
        )


@dataclass
class QcAssessment:
    """One round's structured audit: gaps, queries, ledgered fields, revised draft.

    Invariants (validated on construction): exactly one query per missing
    image-related field, none for admin fields, and every missing admin field
    is ledgered under need_more_info.
    """

    round_index: int
    missing: frozenset[str]
    queries: tuple[RetrievalQuery, ...]
    revised_draft: StructuredReport
    need_more_info: tuple[tuple[str, str], ...]
    checklist: Checklist
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        self.missing = frozenset(self.missing)
        image = set(self.checklist.image_related())
        missing_image = {f for f in self.missing if f in image}
        query_fields = [q.field_name for q in self.queries]
        if sorted(query_fields) != sorted(missing_image):
            raise SchemaViolation(
                f"queries {sorted(query_fields)} must map 1:1 onto missing "
                f"image-related fields {sorted(missing_image)}"
            )
        nmi_fields = {f for f, _ in self.need_more_info}
        missing_admin = self.missing - missing_image
        if not missing_admin <= nmi_fields:
            raise SchemaViolation(
                f"missing admin fields {sorted(missing_admin - nmi_fields)} "
                "not ledgered in need_more_info"
            )

    def missing_image_related(self) -> frozenset[str]:
        image = set(self.checklist.image_related())
        return frozenset(f for f in self.missing if f in image)

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "missing": sorted(self.missing),
            "queries": [
                {"field": q.field_name, "text": q.text} for q in self.queries
            ],
            "need_more_info": [
                {"field": f, "reason": r} for f, r in self.need_more_info
            ],
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class Verdict:
    passed: bool
    violations: tuple[str, ...] = ()


def empty_report(slide_id: str, checklist: Checklist, narrative: str = "") -> StructuredReport:
    entries = {
        f.name: FieldEntry(name=f.name, category=f.category) for f in checklist.fields
    }
    return StructuredReport(slide_id=slide_id, entries=entries, free_narrative=narrative)


def matching_segment(text: str, spec: FieldSpec) -> str | None:
    """First sentence-ish segment of ``text`` matching ``spec``, else the whole
    text when only the concatenation matches (e.g. a regex spanning segments)."""
    if not spec.matches(text):
        return None
    for seg in _SEGMENT_SPLIT.split(text):
        seg = seg.strip()
        if seg and spec.matches(seg):
            return seg
    return text.strip()


def report_from_draft(slide_id: str, draft: str, checklist: Checklist) -> StructuredReport:
    """Structure a free-text draft against the checklist.

    Every field whose patterns match the draft is filled with the matching
    segment at WSI_REPORT priority, carrying an initial-draft provenance ref;
    the draft itself becomes the report narrative.
    """
    report = empty_report(slide_id, checklist, narrative=draft)
    for spec in checklist.fields:
        seg = matching_segment(draft, spec)
        if seg is not None:
            report.entries[spec.name] = FieldEntry(
                name=spec.name,
                category=spec.category,
                value=seg,
                status=ReportStatus.FILLED,
                evidence_refs=(draft_ref(0),),
                source=SourceRank.WSI_REPORT,
            )
    return report


def covered_fields(report: StructuredReport, checklist: Checklist) -> frozenset[str]:
    """Fields whose patterns match any filled value or the narrative."""
    parts = report.filled_values()
    if report.free_narrative:
        parts.append(report.free_narrative)
    covered = set()
    for spec in checklist.fields:
        if any(spec.matches(p) for p in parts):
            covered.add(spec.name)
    return frozenset(covered)


def audit_checklist(
    report: StructuredReport, checklist: Checklist, round_index: int
) -> QcAssessment:
    """Deterministic audit: gaps from pattern coverage, one query per
    image-related gap, every admin gap ledgered. Doubles as the offline critic."""
    covered = covered_fields(report, checklist)
    missing = [f for f in checklist.fields if f.name not in covered]
    queries = tuple(
        RetrievalQuery(
            text=f.render_query(checklist.dataset_context),
            round_index=max(round_index, 1),
            field_name=f.name,
        )
        for f in missing
        if f.category is FieldCategory.IMAGE_RELATED
    )
    need_more_info = tuple(
        (f.name, NEED_MORE_INFO_REASON)
        for f in missing
        if f.category is FieldCategory.ADMIN_REQUIRED
    )
    return QcAssessment(
        round_index=round_index,
        missing=frozenset(f.name for f in missing),
        queries=queries,
        revised_draft=report.copy(),
        need_more_info=need_more_info,
        checklist=checklist,
    )


def assessment_to_wire(assessment: QcAssessment) -> str:
    """Serialize an assessment to the critic wire schema (JSON text)."""
    revised = {}
    doc = {
        "missing": sorted(assessment.missing),
        "queries": [
            {"field": q.field_name, "text": q.text} for q in assessment.queries
        ],
        "revised": revised,
        "need_more_info": [
            {"field": f, "reason": r} for f, r in assessment.need_more_info
        ],
    }
    return json.dumps(doc, ensure_ascii=False)


def parse_assessment(
    raw: str,
    checklist: Checklist,
    round_index: int,
    base_report: StructuredReport,
) -> QcAssessment:
    """Parse and sanitize a critic document into a valid QcAssessment.

    Unknown field names are dropped with a warning record. Queries for
    admin-required fields are stripped and the field is ledgered instead;
    a missing image-related field without a query gets one synthesized from
    its template, so the query/field bijection always holds. Raises
    Unparseable for undecodable documents and SchemaViolation for decodable
    ones with wrong shapes; callers fall back to audit_checklist on either.
    """
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise Unparseable(f"critic output is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise Unparseable(f"critic output must be a JSON object, got {type(doc).__name__}")

    missing_raw = doc.get("missing", [])
    queries_raw = doc.get("queries", [])
    revised_raw = doc.get("revised", {})
    nmi_raw = doc.get("need_more_info", [])
    if not isinstance(missing_raw, list) or not all(isinstance(m, str) for m in missing_raw):
        raise SchemaViolation("'missing' must be a list of field names")
    if not isinstance(queries_raw, list):
        raise SchemaViolation("'queries' must be a list")
    if not isinstance(revised_raw, dict):
        raise SchemaViolation("'revised' must be an object of field -> value")
    if not isinstance(nmi_raw, list):
        raise SchemaViolation("'need_more_info' must be a list")

    warnings: list[str] = []
    known = set(checklist.field_names())

    missing: set[str] = set()
    for name in missing_raw:
        if name in known:
            missing.add(name)
        else:
            warnings.append(f"dropped unknown missing field {name!r}")

    nmi: dict[str, str] = {}
    for item in nmi_raw:
        if not isinstance(item, dict) or "field" not in item:
            raise SchemaViolation(f"need_more_info entry {item!r} lacks 'field'")
        name = item["field"]
        if name not in known:
            warnings.append(f"dropped unknown need_more_info field {name!r}")
            continue
        nmi.setdefault(name, str(item.get("reason", NEED_MORE_INFO_REASON)))

    query_text: dict[str, str] = {}
    for item in queries_raw:
        if not isinstance(item, dict) or "field" not in item or "text" not in item:
            raise SchemaViolation(f"query entry {item!r} lacks 'field'/'text'")
        name, text = item["field"], item["text"]
        spec = checklist.get(name)
        if spec is None:
            warnings.append(f"dropped query for unknown field {name!r}")
            continue
        if spec.category is FieldCategory.ADMIN_REQUIRED:
            warnings.append(f"stripped query for admin-required field {name!r}")
            nmi.setdefault(name, NEED_MORE_INFO_REASON)
            continue
        if name in query_text:
            warnings.append(f"dropped duplicate query for field {name!r}")
            continue
        query_text[name] = text

    image = set(checklist.image_related())
    for name in sorted(missing):
        spec = checklist.get(name)
        if spec.category is FieldCategory.ADMIN_REQUIRED:
            nmi.setdefault(name, NEED_MORE_INFO_REASON)
        elif name not in query_text:
            warnings.append(f"synthesized template query for missing field {name!r}")
            query_text[name] = spec.render_query(checklist.dataset_context)
    for name in list(query_text):
        if name not in missing:
            warnings.append(f"dropped query for non-missing field {name!r}")
            del query_text[name]

    queries = tuple(
        RetrievalQuery(
            text=query_text[f.name], round_index=max(round_index, 1), field_name=f.name
        )
        for f in checklist.fields
        if f.name in query_text
    )

    revised = base_report.copy()
    for name, value in revised_raw.items():
        spec = checklist.get(name)
        if spec is None:
            warnings.append(f"dropped revision for unknown field {name!r}")
            continue
        if not isinstance(value, str) or not value.strip():
            warnings.append(f"dropped empty revision for field {name!r}")
            continue
        entry = revised.entries[name]
        if entry.filled() and entry.source is not None and entry.source < SourceRank.WSI_REPORT:
            warnings.append(
                f"kept higher-priority value for {name!r} over critic revision"
            )
            continue
        revised.entries[name] = FieldEntry(
            name=name,
            category=spec.category,
            value=value.strip(),
            status=ReportStatus.FILLED,
            evidence_refs=(draft_ref(round_index),),
            source=SourceRank.WSI_REPORT,
        )

    for warning in warnings:
        logger.warning("assessment round %d: %s", round_index, warning)

    return QcAssessment(
        round_index=round_index,
        missing=frozenset(missing),
        queries=queries,
        revised_draft=revised,
        need_more_info=tuple(
            (f.name, nmi[f.name]) for f in checklist.fields if f.name in nmi
        ),
        checklist=checklist,
        warnings=tuple(warnings),
    )


@dataclass(frozen=True)
class _Candidate:
    rank: SourceRank
    round_index: int
    patch_order: int  # lowest supporting patch index; sentinel for non-patch tiers
    value: str
    refs: tuple[EvidenceRef, ...]

    def sort_key(self):
        return (int(self.rank), -self.round_index, self.patch_order, self.value)


_NO_PATCH = 1 << 60


def merge_with_priority(
    report: StructuredReport,
    evidence: list,  # list[PatchDescription]; typed loosely to avoid an import cycle
    checklist: Checklist,
    round_index: int,
) -> tuple[StructuredReport, list[dict]]:
    """Fuse new patch evidence into the report under the source priority order.

    Per field, candidates are gathered from the three tiers and the best
    (lowest rank, then newest round, then lowest patch index) non-empty one
    wins; the ordering makes the result invariant to candidate arrival order.
    Patch evidence is only eligible for image-related fields and dataset
    context only for admin-required fields, so a winner is always properly
    grounded and the merged report never fabricates. Losing values are
    returned as conflict records for the trace.

    Returns (merged report, conflicts).
    """
    merged = report.copy()
    conflicts: list[dict] = []
    for spec in checklist.fields:
        entry = merged.entries.get(spec.name)
        if entry is None:  # report built against an older checklist
            entry = FieldEntry(name=spec.name, category=spec.category)
            merged.entries[spec.name] = entry
        candidates: list[_Candidate] = []

        if entry.filled():
            existing_rounds = [r.round_index for r in entry.evidence_refs] or [0]
            existing_patches = [
                r.patch_index for r in entry.evidence_refs if r.kind == "patch"
            ]
            candidates.append(
                _Candidate(
                    rank=entry.source if entry.source is not None else SourceRank.WSI_REPORT,
                    round_index=max(existing_rounds),
                    patch_order=min(existing_patches) if existing_patches else _NO_PATCH,
                    value=entry.value,
                    refs=entry.evidence_refs,
                )
            )

        if spec.category is FieldCategory.IMAGE_RELATED:
            supporting = sorted(
                (d for d in evidence if spec.matches(d.text)),
                key=lambda d: d.patch.patch_index,
            )
            if supporting:
                refs = tuple(
                    patch_ref(d.patch.patch_index, round_index) for d in supporting
                )
                candidates.append(
                    _Candidate(
                        rank=SourceRank.SUPPLEMENT_EVIDENCE,
                        round_index=round_index,
                        patch_order=supporting[0].patch.patch_index,
                        value=supporting[0].text,
                        refs=refs,
                    )
                )
        elif checklist.dataset_context:
            seg = matching_segment(checklist.dataset_context, spec)
            if seg is not None:
                candidates.append(
                    _Candidate(
                        rank=SourceRank.DATASET_CONTEXT,
                        round_index=0,
                        patch_order=_NO_PATCH,
                        value=seg,
                        refs=(),
                    )
                )

        if not candidates:
            continue  # no candidate at any tier: stays undetermined
        candidates.sort(key=_Candidate.sort_key)
        winner = candidates[0]
        for loser in candidates[1:]:
            if loser.value != winner.value:
                conflicts.append(
                    {
                        "field": spec.name,
                        "round": round_index,
                        "kept": winner.value,
                        "kept_source": winner.rank.name,
                        "dropped": loser.value,
                        "dropped_source": loser.rank.name,
                    }
                )
        merged.entries[spec.name] = FieldEntry(
            name=spec.name,
            category=spec.category,
            value=winner.value,
            status=ReportStatus.FILLED,
            evidence_refs=winner.refs,
            source=winner.rank,
        )
    return merged, conflicts


def validate_no_fabrication(report: StructuredReport, assessment: QcAssessment) -> Verdict:
    """Check the anti-fabrication contract on a report/assessment pair.

    PASS iff every filled image-related field is grounded (patch refs, or an
    initial-draft ref at WSI_REPORT priority) and every unfilled field is
    accounted for in the assessment's missing set or need_more_info ledger.
    """
    violations: list[str] = []
    ledgered = assessment.missing | {f for f, _ in assessment.need_more_info}
    for name, entry in report.entries.items():
        if entry.filled():
            if entry.category is not FieldCategory.IMAGE_RELATED:
                continue
            has_patch = any(r.kind == "patch" for r in entry.evidence_refs)
            has_draft = (
                entry.source is SourceRank.WSI_REPORT
                and any(r.kind == INITIAL_DRAFT_REF for r in entry.evidence_refs)
            )
            if not (has_patch or has_draft):
                violations.append(name)
        elif name not in ledgered:
            violations.append(name)
    return Verdict(passed=not violations, violations=tuple(violations))


UNDETERMINED_TEMPLATE = "{field}: undetermined (insufficient evidence)"


def render_narrative(report: StructuredReport, template: list[str] | None = None) -> str:
    """Render the report as deterministic text, one section per field.

    ``template`` is the section order; defaults to the report's field order.
    Undetermined fields are stated as such rather than omitted.
    """
    order = template if template is not None else list(report.entries)
    lines = []
    for name in order:
        entry = report.entries.get(name)
        if entry is None or not entry.filled():
            lines.append(UNDETERMINED_TEMPLATE.format(field=name))
        else:
            lines.append(f"{name}: {entry.value}")
    return "\n".join(lines) + ("\n" if lines else "")
