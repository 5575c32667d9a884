"""Evaluation harness: overlap metrics, a greedy embedding score, and
checklist-based field recall.

All metrics run on a deterministic Unicode tokenizer: text is lowercased,
alphabetic-script runs split on whitespace/punctuation, and every CJK code
point becomes its own token, so Chinese reports evaluate without an external
segmenter. METEOR here is exact-match only ("METEOR-exact": no stemming or
synonymy), and BLEU applies add-1 smoothing to zero n-gram precisions;
both choices keep short clinical sentences from degenerating to hard zeros
and are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import logging
import math
import unicodedata
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .errors import EmbedderFailure
from .qc import Checklist

logger = logging.getLogger(__name__)

_CJK_RANGES = (
    (0x3040, 0x30FF),    # kana
    (0x3400, 0x4DBF),    # ideograph extension A
    (0x4E00, 0x9FFF),    # unified ideographs
    (0xF900, 0xFAFF),    # compatibility ideographs
    (0x20000, 0x2FA1F),  # extensions B+ and supplement
)


def _is_cjk(cp: int) -> bool:
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class TokenizedText:
    tokens: tuple[str, ...]
    original: str

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenizedText:
    """Deterministic lowercase tokenization; one token per CJK code point."""
    tokens: list[str] = []
    word: list[str] = []
    for ch in text.lower():
        cp = ord(ch)
        if _is_cjk(cp):
            if word:
                tokens.append("".join(word))
                word = []
            tokens.append(ch)
        elif unicodedata.category(ch)[0] in ("L", "N"):
            word.append(ch)
        else:
            if word:
                tokens.append("".join(word))
                word = []
    if word:
        tokens.append("".join(word))
    return TokenizedText(tokens=tuple(tokens), original=text)


def _as_tokens(text) -> TokenizedText:
    return text if isinstance(text, TokenizedText) else tokenize(text)


def _ngrams(tokens: tuple[str, ...], n: int) -> Counter:
    return Counter(tokens[i : i + n] for i in range(len(tokens) - n + 1))


def bleu(candidate, reference, max_n: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions times the brevity penalty.

    Any order with zero matches gets add-1 smoothing on numerator and
    denominator. An empty candidate scores 0.
    """
    if max_n not in (1, 2, 3, 4):
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand.tokens:
        return 0.0
    log_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(cand.tokens, n)
        ref_counts = _ngrams(ref.tokens, n)
        num = sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
        den = max(len(cand.tokens) - n + 1, 0)
        if num == 0:
            num, den = num + 1, den + 1
        log_sum += math.log(num / den)
    geo_mean = math.exp(log_sum / max_n)
    c, r = len(cand.tokens), len(ref.tokens)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * geo_mean


def _lcs_len(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok in a:
        cur = [0]
        for j, other in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if tok == other else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> tuple[float, float]:
    """Longest-common-subsequence F1 and recall."""
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    lcs = _lcs_len(cand.tokens, ref.tokens)
    precision = lcs / len(cand.tokens) if cand.tokens else 0.0
    recall = lcs / len(ref.tokens) if ref.tokens else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return f1, recall


def meteor(candidate, reference) -> float:
    """Exact-match METEOR: leftmost-greedy unigram alignment, recall-weighted
    harmonic mean, and the standard fragmentation penalty 0.5*(chunks/m)^3."""
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand.tokens or not ref.tokens:
        return 0.0
    positions: dict[str, deque] = defaultdict(deque)
    for j, tok in enumerate(ref.tokens):
        positions[tok].append(j)
    alignment: list[tuple[int, int]] = []
    for i, tok in enumerate(cand.tokens):
        if positions[tok]:
            alignment.append((i, positions[tok].popleft()))
    m = len(alignment)
    if m == 0:
        return 0.0
    precision = m / len(cand.tokens)
    recall = m / len(ref.tokens)
    f_mean = 10 * precision * recall / (recall + 9 * precision)
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


def embed_score(candidate, reference, token_embedder) -> tuple[float, float]:
    """Greedy cosine matching over per-token embeddings.

    recall = mean over reference tokens of the best cosine against any
    candidate token; precision symmetric; F harmonic. The embedder must map
    a list of tokens to unit vectors (e.g. clients.MockEmbedder.embed).
    """
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand.tokens or not ref.tokens:
        return 0.0, 0.0
    try:
        cand_vecs = np.asarray(token_embedder(list(cand.tokens)), dtype=np.float64)
        ref_vecs = np.asarray(token_embedder(list(ref.tokens)), dtype=np.float64)
    except Exception as exc:
        raise EmbedderFailure(f"token embedder failed: {exc}") from exc
    sims = ref_vecs @ cand_vecs.T
    recall = float(sims.max(axis=1).mean())
    precision = float(sims.max(axis=0).mean())
    if precision + recall <= 1e-12:
        return 0.0, recall
    return 2 * precision * recall / (precision + recall), recall


def field_recall(candidate_text: str, reference_text: str, checklist: Checklist) -> float:
    """Fraction of reference-covered checklist fields also covered by the
    candidate. An empty denominator (reference covers nothing) returns 1.0
    and is flagged in the log."""
    if not checklist.fields:
        raise ValueError("field_recall needs a non-empty checklist")
    ref_fields = [f for f in checklist.fields if f.matches(reference_text)]
    if not ref_fields:
        logger.warning("field_recall: reference matches no checklist field; returning 1.0")
        return 1.0
    hit = sum(1 for f in ref_fields if f.matches(candidate_text))
    return hit / len(ref_fields)


def field_coverage(candidate_text: str, checklist: Checklist) -> float:
    """Full-checklist variant: fraction of all fields the candidate covers."""
    if not checklist.fields:
        return 1.0
    hit = sum(1 for f in checklist.fields if f.matches(candidate_text))
    return hit / len(checklist.fields)


@dataclass
class MetricsReport:
    """Corpus-level arithmetic means of the per-pair metrics."""

    bleu1: float
    bleu4: float
    rouge_l_f: float
    rouge_l_recall: float
    meteor: float
    embed_score_f: float
    embed_score_recall: float
    field_recall: float
    field_coverage: float
    avg_len: float
    n_pairs: int

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}


PAIR_COLUMNS = (
    "bleu1",
    "bleu4",
    "rouge_l_f",
    "rouge_l_recall",
    "meteor",
    "embed_score_f",
    "embed_score_recall",
    "field_recall",
    "field_coverage",
    "candidate_len",
)


def default_token_embedder():
    from .clients import MockEmbedder  # local import: metrics stays client-agnostic

    return MockEmbedder(dim=256, seed=0).embed


def evaluate_pair(candidate: str, reference: str, checklist: Checklist, token_embedder) -> dict:
    cand_tok, ref_tok = tokenize(candidate), tokenize(reference)
    f_embed, r_embed = embed_score(cand_tok, ref_tok, token_embedder)
    rl_f, rl_r = rouge_l(cand_tok, ref_tok)
    return {
        "bleu1": bleu(cand_tok, ref_tok, max_n=1),
        "bleu4": bleu(cand_tok, ref_tok, max_n=4),
        "rouge_l_f": rl_f,
        "rouge_l_recall": rl_r,
        "meteor": meteor(cand_tok, ref_tok),
        "embed_score_f": f_embed,
        "embed_score_recall": r_embed,
        "field_recall": field_recall(candidate, reference, checklist),
        "field_coverage": field_coverage(candidate, checklist),
        "candidate_len": float(len(cand_tok.tokens)),
    }


def evaluate_corpus(
    pairs: list[tuple[str, str]], checklist: Checklist, token_embedder=None
) -> MetricsReport:
    """Average per-pair metrics arithmetically over the corpus."""
    if not pairs:
        raise ValueError("evaluate_corpus needs at least one (candidate, reference) pair")
    if token_embedder is None:
        token_embedder = default_token_embedder()
    rows = [evaluate_pair(c, r, checklist, token_embedder) for c, r in pairs]
    mean = lambda key: sum(row[key] for row in rows) / len(rows)
    return MetricsReport(
        bleu1=mean("bleu1"),
        bleu4=mean("bleu4"),
        rouge_l_f=mean("rouge_l_f"),
        rouge_l_recall=mean("rouge_l_recall"),
        meteor=mean("meteor"),
        embed_score_f=mean("embed_score_f"),
        embed_score_recall=mean("embed_score_recall"),
        field_recall=mean("field_recall"),
        field_coverage=mean("field_coverage"),
        avg_len=mean("candidate_len"),
        n_pairs=len(rows),
    )


def write_per_pair_csv(path, slide_ids: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("slide_id",) + PAIR_COLUMNS)
        for slide_id, row in zip(slide_ids, rows):
            writer.writerow([slide_id] + [row[c] for c in PAIR_COLUMNS])
