"""End-to-end loop: initial draft + coverage evidence, then bounded
audit-retrieve-describe-revise rounds with three termination conditions.

Round 0 builds the fused starting report (slide draft structured against the
checklist, merged with descriptions of cluster-sampled patches). Rounds
1..T each audit the previous report, retrieve fresh patches for the
image-evidenceable gaps, describe them, and merge. The loop stops at the
first satisfied condition, checked in this order every round: all criteria
met; only non-image-evidenceable gaps left; round budget reached.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

from . import clients, qc, retrieval, sampling
from .config import PipelineConfig
from .errors import PartialBatch, SchemaViolation, TransportError, Unparseable, WsiReportError
from .features import FeatureStore, PatchImageSource, normalize
from .trace import IterationTrace

logger = logging.getLogger(__name__)


class TerminationReason(str, Enum):
    QC_PASS = "qc_pass"
    ONLY_NON_EVIDENCEABLE_REMAINING = "only_non_evidenceable_remaining"
    BUDGET_EXHAUSTED = "budget_exhausted"


@dataclass
class PipelineState:
    """Mutable per-slide loop state threaded through the rounds."""

    config: PipelineConfig
    store: FeatureStore
    image_source: PatchImageSource
    checklist: qc.Checklist
    trace: IterationTrace
    index: retrieval.SearchIndex
    ledger: retrieval.ExclusionLedger = field(default_factory=retrieval.ExclusionLedger)
    report: qc.StructuredReport | None = None
    evidence: list[clients.PatchDescription] = field(default_factory=list)
    described: set[int] = field(default_factory=set)


def init_state(
    config: PipelineConfig,
    store: FeatureStore,
    image_source: PatchImageSource,
    checklist: qc.Checklist | None = None,
) -> PipelineState:
    if checklist is None:
        checklist = (
            qc.Checklist.from_file(config.checklist_path)
            if config.checklist_path
            else qc.Checklist(fields=())
        )
    store = normalize(store)
    return PipelineState(
        config=config,
        store=store,
        image_source=image_source,
        checklist=checklist,
        trace=IterationTrace(store.slide_id),
        index=retrieval.build_index(store),
    )


def _describe(
    state: PipelineState,
    pairs: list[tuple],
    round_index: int,
    source_query: str | None,
) -> list[clients.PatchDescription]:
    """Describe (ref, bytes) pairs, keeping partial results on batch failures."""
    endpoint = state.config.endpoint(clients.ModelRole.PATCH_DESCRIBER)
    try:
        return clients.describe_patches(
            endpoint,
            pairs,
            batch_size=state.config.describe_batch_size,
            round_index=round_index,
            source_query=source_query,
            store=state.store,
        )
    except PartialBatch as exc:
        logger.warning("describe round %d: %d patches failed", round_index, len(exc.indices))
        return list(exc.descriptions)


def _commit_described(
    state: PipelineState, descriptions: list[clients.PatchDescription]
) -> None:
    # commit only after describe succeeded, so failures don't burn patches
    described_now = {d.patch.patch_index for d in descriptions}
    state.described |= described_now
    if state.config.retrieval.dedup:
        state.ledger.add(described_now)


def _revise(
    state: PipelineState,
    base: qc.StructuredReport,
    descriptions: list[clients.PatchDescription],
    round_index: int,
) -> qc.StructuredReport:
    merged, conflicts = qc.merge_with_priority(
        base, descriptions, state.checklist, round_index=round_index
    )
    verdict = qc.validate_no_fabrication(
        merged, qc.audit_checklist(merged, state.checklist, round_index=round_index)
    )
    state.trace.append(
        "revise",
        round_index,
        {
            "report": merged.to_dict(),
            "conflicts": conflicts,
            "validation": {"passed": verdict.passed, "violations": list(verdict.violations)},
        },
    )
    state.report = merged
    state.evidence = descriptions
    return merged


def run_initial_round(
    config: PipelineConfig,
    store: FeatureStore,
    image_source: PatchImageSource,
    state: PipelineState | None = None,
) -> tuple[qc.StructuredReport, IterationTrace]:
    """Round 0: slide draft, cluster-sampled evidence, priority fusion."""
    if state is None:
        state = init_state(config, store, image_source)
    trace = state.trace

    draft = clients.generate_wsi_draft(
        config.endpoint(clients.ModelRole.WSI_DRAFT), state.store.slide_id
    )
    trace.append("draft", 0, {"slide_id": state.store.slide_id, "text": draft})

    model = sampling.kmeans_fit(
        state.store,
        k=min(config.sampler.k, state.store.count),
        seed=config.sampler_seed,
        max_iters=config.sampler.max_iters,
        tol=config.sampler.tol,
    )
    sample = sampling.cluster_sample(
        model, per_cluster=config.sampler.per_cluster, seed=config.sampler_seed
    )
    trace.append(
        "sample",
        0,
        {
            "k": model.k,
            "per_cluster": config.sampler.per_cluster,
            "seed": sample.seed,
            "indices": list(sample.patch_indices),
            "per_cluster_counts": {str(c): n for c, n in sample.per_cluster_counts.items()},
            "normalized": state.store.normalized,
            "empty_clusters": list(model.empty_clusters),
            "inertia": model.inertia,
        },
    )

    refs = [state.store.coords[i] for i in sample.patch_indices]
    hits = [retrieval.RetrievalHit(patch=r, score=1.0, round_index=0) for r in refs]
    crops, misses = retrieval.crop_patches(state.image_source, hits)
    pairs = [(hit.patch, data) for hit, data in crops]
    descriptions = _describe(state, pairs, round_index=0, source_query=None)
    trace.append(
        "describe",
        0,
        {
            "count": len(descriptions),
            "descriptions": [d.to_dict() for d in descriptions],
            "tile_misses": [{"x": m.x, "y": m.y, "patch_index": m.patch_index} for m in misses],
        },
    )
    _commit_described(state, descriptions)

    base = qc.report_from_draft(state.store.slide_id, draft, state.checklist)
    fused = _revise(state, base, descriptions, round_index=0)
    return fused, trace


def assess_round(
    config: PipelineConfig, state: PipelineState, round_index: int
) -> qc.QcAssessment:
    """Run the critic and parse its document; parse failures never change the
    loop semantics because the deterministic auditor takes over."""
    raw = clients.critique(
        config.endpoint(clients.ModelRole.CRITIC),
        state.report,
        state.evidence,
        state.checklist,
    )
    source = "critic"
    try:
        assessment = qc.parse_assessment(raw, state.checklist, round_index, state.report)
    except (Unparseable, SchemaViolation) as exc:
        logger.warning("round %d: critic output rejected (%s); using auditor", round_index, exc)
        assessment = qc.audit_checklist(state.report, state.checklist, round_index)
        source = "auditor_fallback"
    state.trace.append("assess", round_index, {**assessment.to_dict(), "source": source})
    return assessment


def run_qc_round(
    config: PipelineConfig,
    state: PipelineState,
    round_index: int,
    assessment: qc.QcAssessment | None = None,
) -> tuple[qc.StructuredReport, qc.QcAssessment, list[retrieval.RetrievalHit]]:
    """One audit-retrieve-describe-revise round against the previous report.

    All of a round's queries share one exclusion view: the committed ledger
    plus the round's own in-flight hits, so a round never describes a patch
    twice. Commits to the durable ledger happen only after describe returns.
    A query whose un-excluded pool runs short is logged, never fatal.
    """
    if assessment is None:
        assessment = assess_round(config, state, round_index)
    trace = state.trace

    round_hits: list[retrieval.RetrievalHit] = []
    descriptions: list[clients.PatchDescription] = []
    scratch = state.ledger.copy() if config.retrieval.dedup else None
    k = config.retrieval.top_k
    for query in assessment.queries:
        embedding = clients.embed_text(
            config.endpoint(clients.ModelRole.EMBEDDER), [query.text]
        )[0]
        hits = retrieval.search_topk(
            state.index,
            embedding,
            k,
            ledger=scratch,
            query_text=query.text,
            round_index=round_index,
        )
        if scratch is not None:
            retrieval.commit_hits(scratch, hits)
        shortfall = k - len(hits)
        if shortfall:
            logger.warning(
                "round %d query %r: pool exhausted, %d short",
                round_index,
                query.field_name,
                shortfall,
            )
        trace.append(
            "retrieve",
            round_index,
            {
                "field": query.field_name,
                "query_text": query.text,
                "k": k,
                "hits": [h.to_dict() for h in hits],
                "shortfall": shortfall,
            },
        )
        crops, misses = retrieval.crop_patches(state.image_source, hits)
        if misses:
            logger.warning("round %d: %d tiles missing", round_index, len(misses))
        pairs = [(hit.patch, data) for hit, data in crops]
        descriptions.extend(
            _describe(state, pairs, round_index=round_index, source_query=query.text)
        )
        round_hits.extend(hits)

    trace.append(
        "describe",
        round_index,
        {"count": len(descriptions), "descriptions": [d.to_dict() for d in descriptions]},
    )
    _commit_described(state, descriptions)

    revised = _revise(state, assessment.revised_draft, descriptions, round_index)
    return revised, assessment, round_hits


def qc_iterate(
    config: PipelineConfig,
    store: FeatureStore,
    image_source: PatchImageSource,
    checklist: qc.Checklist | None = None,
) -> tuple[qc.StructuredReport, TerminationReason, IterationTrace]:
    """Run the full loop for one slide and persist the trace.

    Returns the final report, the termination reason, and the trace. On a
    transport or pipeline failure mid-run, the trace is closed with reason
    "error" (and persisted if configured) before the exception propagates.
    Configuration problems surface before any model call.
    """
    state = init_state(config, store, image_source, checklist)
    trace = state.trace
    try:
        run_initial_round(config, store, image_source, state=state)
        reason = TerminationReason.BUDGET_EXHAUSTED
        executed = 0
        note = None
        for round_index in range(1, config.max_rounds + 1):
            assessment = assess_round(config, state, round_index)
            executed = round_index
            if not assessment.missing:
                reason = TerminationReason.QC_PASS
                note = "pass returns the previous round's report unchanged"
                break
            if not assessment.missing_image_related():
                reason = TerminationReason.ONLY_NON_EVIDENCEABLE_REMAINING
                note = "remaining gaps are non-image-evidenceable; report unchanged"
                break
            run_qc_round(config, state, round_index, assessment=assessment)
        payload = {"reason": reason.value, "executed_qc_rounds": executed}
        if note:
            payload["note"] = note
        trace.append("terminate", executed, payload)
    except (TransportError, WsiReportError) as exc:
        if not trace.terminated():
            trace.append(
                "terminate",
                trace.events[-1].round_index if trace.events else 0,
                {"reason": "error", "detail": str(exc)},
            )
        if config.trace_path:
            trace.write_jsonl(config.trace_path)
        raise
    if config.trace_path:
        trace.write_jsonl(config.trace_path)
    return state.report, reason, trace
