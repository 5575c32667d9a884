"""Clients for the four model roles, with deterministic offline mocks.

Roles: slide-level draft generator, patch describer, text embedder, and
critic. Live endpoints speak the OpenAI-compatible chat-completion and
embedding wire shapes over HTTP POST with bounded exponential-backoff
retries. Every mock is a pure function of (inputs, seed), which is what
makes whole-pipeline runs reproducible byte for byte.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import time
from dataclasses import dataclass, field as dc_field
from enum import Enum

import numpy as np
import requests

from . import qc
from .errors import DimMismatch, EmptyResponse, PartialBatch, TransportError
from .features import FeatureStore, PatchRef

logger = logging.getLogger(__name__)

BACKOFF_BASE_S = 0.5
BACKOFF_CAP_S = 8.0


class ModelRole(str, Enum):
    WSI_DRAFT = "wsi_draft"
    PATCH_DESCRIBER = "patch_describer"
    EMBEDDER = "embedder"
    CRITIC = "critic"


@dataclass
class ModelEndpoint:
    """Where and how to reach one model role.

    ``mock=True`` endpoints ignore ``base_url`` entirely. ``options`` holds
    role-specific knobs: ``fixtures`` (draft mock), ``lexicon`` terms and
    ``seed`` (mocks), ``dim`` (embedder), prompt templates (live roles).
    """

    role: ModelRole
    base_url: str = ""
    model_name: str = ""
    timeout: float = 30.0
    max_retries: int = 2
    mock: bool = True
    api_key_env: str = ""
    options: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.role = ModelRole(self.role)
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")


@dataclass(frozen=True)
class PatchDescription:
    """One patch-level description: the evidence unit of the whole loop."""

    patch: PatchRef
    text: str
    round_index: int
    source_query: str | None = None

    def __post_init__(self):
        if not self.text:
            raise ValueError("description text must be non-empty")

    def to_dict(self) -> dict:
        return {
            "patch_index": self.patch.patch_index,
            "x": self.patch.x,
            "y": self.patch.y,
            "text": self.text,
            "round": self.round_index,
            "source_query": self.source_query,
        }


def _require_role(endpoint: ModelEndpoint, role: ModelRole) -> None:
    if endpoint.role is not role:
        raise ValueError(f"endpoint role {endpoint.role.value} != required {role.value}")


def _post_with_retries(endpoint: ModelEndpoint, path: str, payload: dict) -> dict:
    """POST JSON with bounded exponential backoff; raises TransportError
    after 1 + max_retries failed attempts, EmptyResponse on a bodyless 200."""
    url = endpoint.base_url.rstrip("/") + path
    headers = {"Content-Type": "application/json"}
    key_env = endpoint.api_key_env
    if key_env and os.environ.get(key_env):
        headers["Authorization"] = f"Bearer {os.environ[key_env]}"
    last_status: object = "connection-error"
    last_detail = ""
    for attempt in range(endpoint.max_retries + 1):
        if attempt:
            time.sleep(min(BACKOFF_BASE_S * 2 ** (attempt - 1), BACKOFF_CAP_S))
        try:
            resp = requests.post(url, json=payload, headers=headers, timeout=endpoint.timeout)
        except requests.RequestException as exc:
            last_status, last_detail = "connection-error", str(exc)
            logger.warning("attempt %d to %s failed: %s", attempt + 1, url, exc)
            continue
        if resp.status_code == 200:
            body = resp.json()
            if not body:
                raise EmptyResponse(f"{url} returned an empty body")
            return body
        last_status, last_detail = resp.status_code, resp.text[:200]
        logger.warning("attempt %d to %s got HTTP %s", attempt + 1, url, resp.status_code)
    raise TransportError(last_status, last_detail)


def _chat_content(body: dict) -> str:
    try:
        content = body["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise EmptyResponse(f"malformed chat completion body: {exc}") from exc
    if not content:
        raise EmptyResponse("chat completion content is empty")
    return content


def _hash_seed(*parts, seed: int = 0) -> int:
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode("utf-8"),
        digest_size=8,
        key=str(seed).encode("utf-8"),
    ).digest()
    return int.from_bytes(digest, "little")


# --- embedder ----------------------------------------------------------------

class MockEmbedder:
    """Deterministic bag-of-tokens hash embedder.

    Each token maps to a fixed pseudo-random direction (seeded by the token
    text); a text embeds to the normalized sum of its token directions.
    Disjoint-token texts are therefore near-orthogonal while shared tokens
    produce genuinely positive cosines, enough structure for the retrieval
    loop to work offline.
    """

    def __init__(self, dim: int = 512, seed: int = 0):
        if dim < 1:
            raise ValueError("embedding dim must be >= 1")
        self.dim = dim
        self.seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            rng = np.random.default_rng(_hash_seed("tok", token, seed=self.seed))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def embed_one(self, text: str) -> np.ndarray:
        tokens = [t for t in text.lower().split() if t.strip(".,;:()")]
        tokens = [t.strip(".,;:()") for t in tokens]
        if not tokens:
            tokens = [""]
        acc = np.zeros(self.dim)
        for tok in tokens:
            acc += self._token_vector(tok)
        norm = np.linalg.norm(acc)
        if norm < 1e-12:  # pathological cancellation; fall back to whole-text hash
            rng = np.random.default_rng(_hash_seed("txt", text, seed=self.seed))
            acc = rng.standard_normal(self.dim)
            norm = np.linalg.norm(acc)
        return acc / norm

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        return [self.embed_one(t) for t in texts]


def embed_text(endpoint: ModelEndpoint, texts: list[str]) -> list[np.ndarray]:
    """One unit vector per input text.

    Mock endpoints use the hash embedder; live endpoints POST an embeddings
    request and renormalize the result. A service returning an unexpected
    dimension raises DimMismatch.
    """
    _require_role(endpoint, ModelRole.EMBEDDER)
    if not texts:
        raise ValueError("texts must be non-empty")
    expected = endpoint.options.get("dim")
    if endpoint.mock:
        embedder = MockEmbedder(dim=expected or 512, seed=endpoint.options.get("seed", 0))
        return embedder.embed(texts)

    body = _post_with_retries(
        endpoint, "/embeddings", {"model": endpoint.model_name, "input": texts}
    )
    try:
        rows = [np.asarray(item["embedding"], dtype=np.float64) for item in body["data"]]
    except (KeyError, TypeError) as exc:
        raise EmptyResponse(f"malformed embeddings body: {exc}") from exc
    if len(rows) != len(texts):
        raise DimMismatch(f"service returned {len(rows)} vectors for {len(texts)} texts")
    out = []
    for row in rows:
        if expected is not None and row.shape[0] != expected:
            raise DimMismatch(f"service returned dim {row.shape[0]}, expected {expected}")
        norm = float(np.linalg.norm(row))
        if norm < 1e-12:
            raise EmptyResponse("service returned a zero embedding")
        out.append(row / norm)
    return out


# --- draft generator ---------------------------------------------------------

_DRAFT_PHRASES = (
    "fragments of gastric mucosa with infiltrating neoplastic glands",
    "an ulcerated mucosal lesion with desmoplastic stromal response",
    "sheets of atypical epithelial cells within fibrous stroma",
    "glandular structures with irregular architecture and luminal debris",
)


def generate_wsi_draft(endpoint: ModelEndpoint, slide_id: str) -> str:
    """Produce the slide-level draft the loop starts from.

    Mock: a per-slide fixture if configured, otherwise a deterministic
    hash-keyed template (distinct across slides, stable across runs).
    """
    _require_role(endpoint, ModelRole.WSI_DRAFT)
    if endpoint.mock:
        fixtures = endpoint.options.get("fixtures", {})
        if slide_id in fixtures:
            return fixtures[slide_id]
        pick = _hash_seed("draft", slide_id, seed=endpoint.options.get("seed", 0))
        phrase = _DRAFT_PHRASES[pick % len(_DRAFT_PHRASES)]
        return f"Slide {slide_id}: sections show {phrase}."

    prompt = endpoint.options.get(
        "prompt_template", "Write a concise pathology report draft for slide {slide_id}."
    ).format(slide_id=slide_id)
    body = _post_with_retries(
        endpoint,
        "/chat/completions",
        {
            "model": endpoint.model_name,
            "messages": [{"role": "user", "content": prompt}],
        },
    )
    return _chat_content(body)


# --- patch describer ---------------------------------------------------------

class MockDescriber:
    """Maps a patch's stored feature to the nearest lexicon term.

    The lexicon is a list of terms embedded with the shared mock embedder;
    a patch whose feature was planted from a term embedding is therefore
    described with that exact term, closing the audit loop offline.
    """

    def __init__(self, lexicon: list[str], embedder: MockEmbedder, store: FeatureStore | None):
        self.terms = list(lexicon)
        self.store = store
        if self.terms:
            self._term_matrix = np.stack([embedder.embed_one(t) for t in self.terms])
        else:
            self._term_matrix = None

    def describe(self, patch: PatchRef) -> str:
        if self._term_matrix is None or self.store is None:
            return f"Patch at ({patch.x}, {patch.y}) shows unremarkable tissue."
        feat = self.store.features[patch.patch_index]
        norm = float(np.linalg.norm(feat))
        if norm < 1e-12:
            return f"Patch at ({patch.x}, {patch.y}) shows unremarkable tissue."
        sims = self._term_matrix @ (feat / norm)
        term = self.terms[int(np.argmax(sims))]
        return f"The region at ({patch.x}, {patch.y}) demonstrates {term}."


def describe_patches(
    endpoint: ModelEndpoint,
    patches: list[tuple[PatchRef, bytes]],
    batch_size: int = 8,
    round_index: int = 0,
    source_query: str | None = None,
    store: FeatureStore | None = None,
) -> list[PatchDescription]:
    """One description per input patch, in input order; batching is invisible.

    ``store`` is only consulted by the mock (its lexicon matching runs on the
    stored features); live endpoints receive the tile bytes base64-encoded.
    """
    _require_role(endpoint, ModelRole.PATCH_DESCRIBER)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not patches:
        return []

    if endpoint.mock:
        embedder = MockEmbedder(
            dim=endpoint.options.get("dim", 512), seed=endpoint.options.get("seed", 0)
        )
        describer = MockDescriber(endpoint.options.get("lexicon", []), embedder, store)
        return [
            PatchDescription(
                patch=ref,
                text=describer.describe(ref),
                round_index=round_index,
                source_query=source_query,
            )
            for ref, _ in patches
        ]

    prompt = endpoint.options.get(
        "prompt_template", "Describe the histology visible in this tissue patch."
    )
    out: list[PatchDescription] = []
    failed: list[int] = []
    for start in range(0, len(patches), batch_size):
        for offset, (ref, image) in enumerate(patches[start : start + batch_size]):
            encoded = base64.b64encode(image).decode("ascii")
            try:
                body = _post_with_retries(
                    endpoint,
                    "/chat/completions",
                    {
                        "model": endpoint.model_name,
                        "messages": [
                            {
                                "role": "user",
                                "content": [
                                    {"type": "text", "text": prompt},
                                    {
                                        "type": "image_url",
                                        "image_url": {"url": f"data:image/png;base64,{encoded}"},
                                    },
                                ],
                            }
                        ],
                    },
                )
            except TransportError:
                failed.append(start + offset)
                continue
            out.append(
                PatchDescription(
                    patch=ref,
                    text=_chat_content(body),
                    round_index=round_index,
                    source_query=source_query,
                )
            )
    if failed:
        if not out:
            raise TransportError("all-failed", f"{len(failed)} describe calls failed")
        raise PartialBatch(failed, out)
    return out


# --- critic ------------------------------------------------------------------

CRITIC_PROMPT_TEMPLATE = (
    "Audit the report below against the checklist. Respond with a JSON object "
    '{{"missing": [...], "queries": [{{"field":..., "text":...}}], '
    '"revised": {{...}}, "need_more_info": [{{"field":..., "reason":...}}]}}. '
    "Never fabricate clinical data; unverifiable fields go to need_more_info. "
    "Checklist fields: {fields}\n\nReport:\n{report}\n\nEvidence:\n{evidence}"
)


def critique(
    endpoint: ModelEndpoint,
    report: qc.StructuredReport,
    evidence: list[PatchDescription],
    checklist: qc.Checklist,
) -> str:
    """Return the critic's raw assessment document (JSON text).

    The mock delegates to the deterministic checklist auditor and serializes
    its output onto the wire schema, so offline runs exercise the same parse
    path as live ones.
    """
    _require_role(endpoint, ModelRole.CRITIC)
    if endpoint.mock:
        assessment = qc.audit_checklist(report, checklist, round_index=1)
        return qc.assessment_to_wire(assessment)

    prompt = endpoint.options.get("prompt_template", CRITIC_PROMPT_TEMPLATE).format(
        fields=", ".join(checklist.field_names()),
        report=qc.render_narrative(report),
        evidence="\n".join(d.text for d in evidence) or "(none)",
    )
    body = _post_with_retries(
        endpoint,
        "/chat/completions",
        {
            "model": endpoint.model_name,
            "messages": [{"role": "user", "content": prompt}],
        },
    )
    return _chat_content(body)
