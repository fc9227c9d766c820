"""Fine-grained experience retrieval over the reports selected by a ranker.

Three chunking strategies share one BM25 scorer: plain fixed-size windows, single sentences
expanded with their neighbors, and fixed-size leaves merged into their parent when enough
siblings are relevant.
"""

import logging
import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Self

import polars as pl
from pydantic import BaseModel, ConfigDict, Field, model_validator

from exprag.exceptions import InvalidParameterError, UnknownMethodError

logger = logging.getLogger(__name__)

_TOKEN = re.compile(r"[^\W_]+")
CONTEXT_SEPARATOR = "\n\n"


def tokenize(text: str) -> list[str]:
    """Lowercase alphanumeric word tokens; no stemming, no stop words."""
    return [match.group().lower() for match in _TOKEN.finditer(text)]


def _token_spans(text: str) -> list[tuple[int, int]]:
    return [match.span() for match in _TOKEN.finditer(text)]


class Chunk(BaseModel):
    """A span of one source note; ``text`` is always ``note[start:end]``."""

    model_config = ConfigDict(frozen=True)

    source: str
    start: int = Field(ge=0)
    end: int = Field(ge=0)
    text: str
    parent: "Chunk | None" = None

    @model_validator(mode="after")
    def _span_matches_text(self) -> Self:
        if self.end - self.start != len(self.text):
            raise ValueError(
                f"Span ({self.start}, {self.end}) does not match a text of {len(self.text)}."
            )
        return self

    @property
    def span(self) -> tuple[int, int]:
        return self.start, self.end

    @classmethod
    def of(
        cls, source: str, note: str, start: int, end: int, parent: "Chunk | None" = None
    ) -> Self:
        return cls(source=source, start=start, end=end, text=note[start:end], parent=parent)


def chunk_fixed(text: str, source: str = "", size: int = 256, overlap: int = 32) -> list[Chunk]:
    """Windows of ``size`` tokens starting every ``size - overlap`` tokens.

    The first chunk starts at character 0 and the last ends at the end of the text, so the
    chunks cover the whole note. A text with fewer tokens than ``size`` is a single chunk.

    Raises:
        InvalidParameterError: If ``size <= overlap`` or ``overlap < 0``.
    """
    if overlap < 0 or size <= overlap:
        raise InvalidParameterError(
            f"Chunking needs size > overlap >= 0, got {size} and {overlap}."
        )
    if not text:
        return []
    spans = _token_spans(text)
    if not spans:
        return [Chunk.of(source, text, 0, len(text))]

    starts = list(range(0, len(spans), size - overlap))
    chunks = []
    for i, first in enumerate(starts):
        start = 0 if i == 0 else spans[first][0]
        end = len(text) if i == len(starts) - 1 else spans[min(first + size, len(spans)) - 1][1]
        chunks.append(Chunk.of(source, text, start, end))
    return chunks


@dataclass(frozen=True)
class CorpusStats:
    doc_count: int
    avg_doc_len: float
    df: dict[str, int] = field(default_factory=dict)

    @classmethod
    def build(cls, documents: Iterable[Sequence[str]]) -> "CorpusStats":
        df: Counter[str] = Counter()
        count = total = 0
        for terms in documents:
            count += 1
            total += len(terms)
            df.update(set(terms))
        return cls(doc_count=count, avg_doc_len=total / count if count else 0.0, df=dict(df))

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1 + (self.doc_count - df + 0.5) / (df + 0.5))


def _bm25(
    query_terms: Iterable[str], terms: Sequence[str], stats: CorpusStats, k1: float, b: float
) -> float:
    counts = Counter(terms)
    length_ratio = len(terms) / stats.avg_doc_len if stats.avg_doc_len > 0 else 1.0
    score = 0.0
    for term in sorted(set(query_terms)):
        tf = counts.get(term, 0)
        if tf:
            score += stats.idf(term) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * length_ratio))
    return score


def bm25_score(
    query_terms: Iterable[str],
    chunk: Chunk,
    stats: CorpusStats,
    k1: float = 1.2,
    b: float = 0.75,
) -> float:
    """Okapi BM25 of a chunk for a query, with ``idf = ln(1 + (N - df + 0.5) / (df + 0.5))``.

    Repeated query terms count once. The score is 0 when no query term occurs in the chunk.
    """
    return _bm25(query_terms, tokenize(chunk.text), stats, k1, b)


class RetrievalMethod(StrEnum):
    BM25 = "bm25"
    SENTENCE_WINDOW = "sentence_window"
    HIER_MERGE = "hier_merge"


class RetrievalHit(BaseModel):
    model_config = ConfigDict(frozen=True)

    chunk: Chunk
    score: float
    method: RetrievalMethod


class RetrieverParams(BaseModel):
    method: RetrievalMethod = RetrievalMethod.BM25
    top_n: int | None = Field(default=5, ge=1, description="Hits per question; None keeps all.")
    chunk_size: int = Field(default=256, ge=1)
    chunk_overlap: int = Field(default=32, ge=0)
    window: int = Field(default=1, ge=0, description="Neighboring sentences on each side.")
    sentence_pattern: str = r"(?<=[.!?])\s+|\n+"
    leaf: int = Field(default=128, ge=1)
    fanout: int = Field(default=4, ge=2)
    merge_threshold: float = Field(default=0.5, gt=0, le=1)
    k1: float = Field(default=1.2, ge=0)
    b: float = Field(default=0.75, ge=0, le=1)
    context_budget: int | None = Field(
        default=6000, ge=1, description="Character cap on the packed context; None disables it."
    )

    @model_validator(mode="after")
    def _overlap_below_size(self) -> Self:
        if self.chunk_overlap >= self.chunk_size:
            raise ValueError("chunk_overlap must be smaller than chunk_size.")
        return self


def _hit_order(hit: RetrievalHit) -> tuple[float, str, int]:
    return -hit.score, hit.chunk.source, hit.chunk.start


def _top(hits: Iterable[RetrievalHit], top_n: int | None) -> list[RetrievalHit]:
    ranked = sorted((hit for hit in hits if hit.score > 0), key=_hit_order)
    return ranked if top_n is None else ranked[:top_n]


def _score_chunks(
    chunks: Sequence[Chunk], query: str, params: RetrieverParams, method: RetrievalMethod
) -> list[RetrievalHit]:
    terms = [tokenize(chunk.text) for chunk in chunks]
    stats = CorpusStats.build(terms)
    query_terms = tokenize(query)
    return [
        RetrievalHit(
            chunk=chunk,
            score=_bm25(query_terms, chunk_terms, stats, params.k1, params.b),
            method=method,
        )
        for chunk, chunk_terms in zip(chunks, terms, strict=True)
    ]


def retrieve_bm25(
    reports: Mapping[str, str], query: str, params: RetrieverParams | None = None
) -> list[RetrievalHit]:
    """Plain BM25 over fixed-size chunks of every report."""
    params = params or RetrieverParams()
    chunks = [
        chunk
        for key in sorted(reports)
        for chunk in chunk_fixed(reports[key], key, params.chunk_size, params.chunk_overlap)
    ]
    return _top(_score_chunks(chunks, query, params, RetrievalMethod.BM25), params.top_n)


def sentence_spans(text: str, pattern: str = r"(?<=[.!?])\s+|\n+") -> list[tuple[int, int]]:
    """Character spans of the sentences of a text, surrounding whitespace excluded."""
    spans = []
    cursor = 0
    for boundary in [*re.finditer(pattern, text), None]:
        stop = boundary.start() if boundary is not None else len(text)
        piece = text[cursor:stop]
        if piece.strip():
            lead = len(piece) - len(piece.lstrip())
            spans.append((cursor + lead, cursor + len(piece.rstrip())))
        if boundary is not None:
            cursor = max(boundary.end(), cursor)
    return spans


def retrieve_sentence_window(
    reports: Mapping[str, str], query: str, params: RetrieverParams | None = None
) -> list[RetrievalHit]:
    """Score single sentences, then widen each hit by ``window`` sentences on both sides."""
    params = params or RetrieverParams()
    sentences: list[Chunk] = []
    neighbors: dict[tuple[str, int], tuple[int, int]] = {}
    for key in sorted(reports):
        note = reports[key]
        spans = sentence_spans(note, params.sentence_pattern)
        for i, (start, end) in enumerate(spans):
            sentences.append(Chunk.of(key, note, start, end))
            low = spans[max(i - params.window, 0)][0]
            high = spans[min(i + params.window, len(spans) - 1)][1]
            neighbors[key, start] = (low, high)

    hits = []
    for hit in _top(
        _score_chunks(sentences, query, params, RetrievalMethod.SENTENCE_WINDOW), params.top_n
    ):
        sentence = hit.chunk
        low, high = neighbors[sentence.source, sentence.start]
        chunk = Chunk.of(sentence.source, reports[sentence.source], low, high, parent=None)
        hits.append(hit.model_copy(update={"chunk": chunk}))
    return hits


def _leaves_with_parents(source: str, note: str, leaf: int, fanout: int) -> list[Chunk]:
    leaves = chunk_fixed(note, source, leaf, 0)
    linked = []
    for first in range(0, len(leaves), fanout):
        group = leaves[first : first + fanout]
        parent = Chunk.of(source, note, group[0].start, group[-1].end)
        linked.extend(child.model_copy(update={"parent": parent}) for child in group)
    return linked


def retrieve_hier_merge(
    reports: Mapping[str, str], query: str, params: RetrieverParams | None = None
) -> list[RetrievalHit]:
    """Leaf retrieval with a single bottom-up merge pass.

    Leaves are ``leaf``-token chunks without overlap; every ``fanout`` consecutive leaves of a
    note share a parent. When at least ``merge_threshold`` of a parent's children are among the
    provisional top hits, the parent replaces them, scored with the best child score.
    """
    params = params or RetrieverParams()
    leaves = [
        chunk
        for key in sorted(reports)
        for chunk in _leaves_with_parents(key, reports[key], params.leaf, params.fanout)
    ]
    siblings = Counter(leaf.parent for leaf in leaves)
    provisional = _top(
        _score_chunks(leaves, query, params, RetrievalMethod.HIER_MERGE), params.top_n
    )

    retrieved: dict[Chunk | None, list[RetrievalHit]] = {}
    for hit in provisional:
        retrieved.setdefault(hit.chunk.parent, []).append(hit)

    merged: list[RetrievalHit] = []
    for parent, children in retrieved.items():
        if parent is not None and len(children) / siblings[parent] >= params.merge_threshold:
            best = max(child.score for child in children)
            merged.append(RetrievalHit(chunk=parent, score=best, method=RetrievalMethod.HIER_MERGE))
            logger.debug(
                "Merged %d/%d leaves into %s%s",
                len(children),
                siblings[parent],
                parent.source,
                parent.span,
            )
        else:
            merged.extend(children)
    return _top(merged, params.top_n)


_DISPATCH = {
    RetrievalMethod.BM25: retrieve_bm25,
    RetrievalMethod.SENTENCE_WINDOW: retrieve_sentence_window,
    RetrievalMethod.HIER_MERGE: retrieve_hier_merge,
}


def retrieve(
    reports: Mapping[str, str],
    query: str,
    method: RetrievalMethod | str,
    params: RetrieverParams | None = None,
) -> list[RetrievalHit]:
    """Retrieve passages from the selected reports with the named method.

    Raises:
        UnknownMethodError: If ``method`` is not a retrieval method.
    """
    try:
        method = RetrievalMethod(method)
    except ValueError:
        raise UnknownMethodError(str(method), [m.value for m in RetrievalMethod]) from None
    if not reports:
        return []
    return _DISPATCH[method](reports, query, params)


def pack_context(hits: Sequence[RetrievalHit], budget: int | None = 6000) -> str:
    """Join hit texts in rank order, dropping the lowest-scored hits whole to fit the budget."""
    kept = list(hits)
    text = CONTEXT_SEPARATOR.join(hit.chunk.text for hit in kept)
    while budget is not None and kept and len(text) > budget:
        kept.pop()
        text = CONTEXT_SEPARATOR.join(hit.chunk.text for hit in kept)
    if len(kept) < len(hits):
        logger.debug("Context budget %s kept %d of %d hits.", budget, len(kept), len(hits))
    return text


def hits_frame(question_id: str, hits: Sequence[RetrievalHit]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "question_id": [question_id] * len(hits),
            "rank": list(range(1, len(hits) + 1)),
            "source_key": [hit.chunk.source for hit in hits],
            "span": [list(hit.chunk.span) for hit in hits],
            "score": [hit.score for hit in hits],
            "method": [str(hit.method) for hit in hits],
        },
        schema={
            "question_id": pl.String,
            "rank": pl.Int64,
            "source_key": pl.String,
            "span": pl.List(pl.Int64),
            "score": pl.Float64,
            "method": pl.String,
        },
    )
