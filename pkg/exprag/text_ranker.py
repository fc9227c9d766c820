"""Text-based report ranking baseline: embed the query and every discharge note, rank by cosine."""

import hashlib
import logging
import threading
from abc import ABC, abstractmethod
from collections.abc import Collection, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple, override

import httpx
import numpy as np
import polars as pl
from pydantic import AnyHttpUrl, BaseModel, Field
from scipy import sparse
from sklearn.feature_extraction.text import TfidfVectorizer

from exprag.cohort import Cohort
from exprag.exceptions import DimensionMismatchError, InvalidParameterError, ProviderFailureError

logger = logging.getLogger(__name__)

# Lowercase alphanumeric runs; single characters count as terms.
TOKEN_PATTERN = r"(?u)[^\W_]+"


@dataclass(frozen=True)
class DocVector:
    """A sparse (1 x V) or dense (D,) weight vector with its cached Euclidean norm."""

    weights: sparse.csr_matrix | np.ndarray
    norm: float

    @classmethod
    def of(cls, weights: sparse.csr_matrix | np.ndarray) -> "DocVector":
        if sparse.issparse(weights):
            weights = sparse.csr_matrix(weights)
            return cls(weights, float(np.sqrt(weights.multiply(weights).sum())))
        weights = np.asarray(weights, dtype=np.float64).ravel()
        return cls(weights, float(np.linalg.norm(weights)))

    @property
    def dim(self) -> int:
        return int(self.weights.shape[-1])

    def dense(self) -> np.ndarray:
        if sparse.issparse(self.weights):
            return np.asarray(self.weights.toarray()).ravel()
        return self.weights


def _dot(u: DocVector, v: DocVector) -> float:
    if sparse.issparse(u.weights) and sparse.issparse(v.weights):
        return float(u.weights.multiply(v.weights).sum())
    return float(np.dot(u.dense(), v.dense()))


def cosine(u: DocVector, v: DocVector) -> float:
    """Cosine similarity in [-1, 1]; 0 when either vector is zero.

    Raises:
        DimensionMismatchError: If the vectors live in spaces of different dimension.
    """
    if u.dim != v.dim:
        raise DimensionMismatchError(u.dim, v.dim)
    if u.norm == 0 or v.norm == 0:
        return 0.0
    return float(np.clip(_dot(u, v) / (u.norm * v.norm), -1.0, 1.0))


def _tfidf_vectorizer() -> TfidfVectorizer:
    # smooth_idf gives idf = ln((1 + N) / (1 + df)) + 1; raw tf, no row normalization.
    return TfidfVectorizer(
        lowercase=True,
        token_pattern=TOKEN_PATTERN,
        smooth_idf=True,
        sublinear_tf=False,
        norm=None,
        dtype=np.float64,
    )


def tfidf_vectorize(corpus: Sequence[str]) -> tuple[list[str], list[DocVector]]:
    """Fit tf-idf over a corpus; vocabulary is sorted, empty documents give zero vectors.

    Raises:
        InvalidParameterError: If the corpus is empty.
    """
    if not corpus:
        raise InvalidParameterError("tf-idf needs at least one document.")
    vectorizer = _tfidf_vectorizer()
    try:
        matrix = vectorizer.fit_transform(corpus).tocsr()
    except ValueError:
        # every document is empty: sklearn refuses an empty vocabulary
        return [], [DocVector.of(sparse.csr_matrix((1, 0))) for _ in corpus]
    vocabulary = vectorizer.get_feature_names_out().tolist()
    return vocabulary, [DocVector.of(matrix.getrow(i)) for i in range(matrix.shape[0])]


class EmbeddingProvider(ABC):
    """Maps a batch of texts to equal-dimension vectors; the same text maps to the same vector."""

    @property
    @abstractmethod
    def identity(self) -> str:
        """Stable name of the provider and of whatever state its vectors depend on."""

    @property
    def family(self) -> str:
        """Identity independent of any corpus the provider was fitted on."""
        return self.identity

    def fitted(self, corpus: Sequence[str]) -> "EmbeddingProvider":
        """A provider bound to ``corpus``; stateless providers return themselves."""
        return self

    @abstractmethod
    def embed(self, texts: Sequence[str]) -> list[DocVector]:
        """Embed texts, one vector per input, in input order."""


class LexicalTfidfProvider(EmbeddingProvider):
    """Offline, deterministic tf-idf embedding fitted on the report corpus."""

    def __init__(self) -> None:
        self._vectorizer: TfidfVectorizer | None = None
        self._fingerprint = "unfitted"

    @property
    @override
    def identity(self) -> str:
        return f"lexical-tfidf:{self._fingerprint}"

    @property
    @override
    def family(self) -> str:
        return "lexical-tfidf"

    @override
    def fitted(self, corpus: Sequence[str]) -> "LexicalTfidfProvider":
        bound = type(self)()
        bound.fit(corpus)
        return bound

    def fit(self, corpus: Sequence[str]) -> None:
        digest = hashlib.sha256()
        for text in corpus:
            digest.update(text.encode("utf-8"))
            digest.update(b"\x00")
        vectorizer = _tfidf_vectorizer()
        vectorizer.fit(corpus)
        self._vectorizer = vectorizer
        self._fingerprint = digest.hexdigest()[:16]
        logger.debug("Fitted tf-idf over %d documents.", len(corpus))

    @override
    def embed(self, texts: Sequence[str]) -> list[DocVector]:
        if self._vectorizer is None:
            raise ProviderFailureError("LexicalTfidfProvider.embed called before fit().")
        matrix = self._vectorizer.transform(texts).tocsr()
        return [DocVector.of(matrix.getrow(i)) for i in range(matrix.shape[0])]


class RemoteEmbeddingSettings(BaseModel):
    url: AnyHttpUrl = Field(description="Embedding endpoint (OpenAI-compatible /embeddings).")
    model: str = Field(default="bge-small-en-v1.5")
    max_chars: int = Field(default=8000, ge=1, description="Inputs are truncated to this length.")
    batch_size: int = Field(default=32, ge=1)
    max_in_flight: int = Field(default=4, ge=1)
    timeout_s: float = Field(default=60.0, gt=0)


class RemoteEmbeddingProvider(EmbeddingProvider):
    """Embeddings from an HTTP service: ``{"model", "input": [...]}`` → ``{"data": [...]}``."""

    def __init__(
        self,
        settings: RemoteEmbeddingSettings,
        api_key: str | None = None,
        client: httpx.Client | None = None,
    ) -> None:
        self._settings = settings
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(headers=headers, timeout=settings.timeout_s)
        self._memo: dict[str, DocVector] = {}
        self._lock = threading.Lock()

    @property
    @override
    def identity(self) -> str:
        return f"remote:{self._settings.url}:{self._settings.model}"

    @override
    def embed(self, texts: Sequence[str]) -> list[DocVector]:
        truncated = [text[: self._settings.max_chars] for text in texts]
        with self._lock:
            missing = sorted({t for t in truncated if t not in self._memo})
        size = self._settings.batch_size
        batches = [missing[i : i + size] for i in range(0, len(missing), size)]
        with ThreadPoolExecutor(max_workers=self._settings.max_in_flight) as pool:
            results = list(pool.map(self._embed_batch, batches))
        with self._lock:
            for batch, vectors in zip(batches, results, strict=True):
                self._memo.update(zip(batch, vectors, strict=True))
            return [self._memo[t] for t in truncated]

    def _embed_batch(self, batch: list[str]) -> list[DocVector]:
        try:
            response = self._client.post(
                str(self._settings.url), json={"model": self._settings.model, "input": batch}
            )
            response.raise_for_status()
            data = sorted(response.json()["data"], key=lambda item: item["index"])
        except (httpx.HTTPError, KeyError, TypeError, ValueError) as e:
            raise ProviderFailureError(
                f"Embedding request to {self._settings.url} failed for a batch of {len(batch)}: {e}"
            ) from e
        if len(data) != len(batch):
            raise ProviderFailureError(
                f"Embedding endpoint returned {len(data)} vectors for {len(batch)} inputs."
            )
        return [DocVector.of(np.asarray(item["embedding"], dtype=np.float64)) for item in data]


class TextRanked(NamedTuple):
    admission_key: str
    score: float


@dataclass(frozen=True)
class CorpusEmbedding:
    keys: tuple[str, ...]
    vectors: tuple[DocVector, ...]
    matrix: sparse.csr_matrix | np.ndarray
    norms: np.ndarray
    encoder: EmbeddingProvider


def _corpus_id(keys: Sequence[str], notes: Sequence[str]) -> str:
    digest = hashlib.sha256()
    for key, note in zip(keys, notes, strict=True):
        digest.update(key.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(note.encode("utf-8"))
        digest.update(b"\x00")
    return digest.hexdigest()[:16]


class EmbeddingCache:
    """Report embeddings per (provider family, corpus), shared across queries.

    The provider is fitted once per corpus, on a cache miss; queries are embedded with the
    provider bound to that corpus.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, str], CorpusEmbedding] = {}
        self._lock = threading.Lock()

    def get_or_build(self, cohort: Cohort, provider: EmbeddingProvider) -> CorpusEmbedding:
        keys = tuple(key for key in cohort.keys if cohort.admissions[key].note is not None)
        notes = [cohort.admissions[key].note or "" for key in keys]
        cache_key = (provider.family, _corpus_id(keys, notes))
        with self._lock:
            cached = self._entries.get(cache_key)
            if cached is not None:
                return cached
            encoder = provider.fitted(notes)
            logger.info("Embedding %d reports with %s", len(keys), encoder.identity)
            vectors = tuple(encoder.embed(notes))
            entry = CorpusEmbedding(
                keys=keys,
                vectors=vectors,
                matrix=_stack(vectors),
                norms=np.asarray([v.norm for v in vectors], dtype=np.float64),
                encoder=encoder,
            )
            self._entries[cache_key] = entry
            return entry


def _stack(vectors: Sequence[DocVector]) -> sparse.csr_matrix | np.ndarray:
    if not vectors:
        return np.zeros((0, 0))
    if sparse.issparse(vectors[0].weights):
        return sparse.vstack([v.weights for v in vectors]).tocsr()
    return np.vstack([v.weights for v in vectors])


DEFAULT_CACHE = EmbeddingCache()


class TextRanker:
    def __init__(
        self, cohort: Cohort, provider: EmbeddingProvider, cache: EmbeddingCache | None = None
    ) -> None:
        self._cohort = cohort
        self._provider = provider
        self._cache = cache or DEFAULT_CACHE

    @cached_property
    def corpus(self) -> CorpusEmbedding:
        return self._cache.get_or_build(self._cohort, self._provider)

    @cached_property
    def _position(self) -> dict[str, int]:
        return {key: i for i, key in enumerate(self.corpus.keys)}

    def _cosines(self, query: DocVector) -> np.ndarray:
        corpus = self.corpus
        if not corpus.keys:
            return np.zeros(0)
        if query.dim != corpus.matrix.shape[1]:
            raise DimensionMismatchError(query.dim, corpus.matrix.shape[1])
        weights = query.weights.T if sparse.issparse(query.weights) else query.weights
        dots = np.asarray(corpus.matrix @ weights, dtype=np.float64).ravel()
        denominators = corpus.norms * query.norm
        scores = np.zeros_like(dots)
        np.divide(dots, denominators, out=scores, where=denominators > 0)
        return np.clip(scores, -1.0, 1.0)

    def rank(
        self, query_text: str, k: int, exclude: Collection[str] = ()
    ) -> list[TextRanked]:
        """Top-k reports by cosine to the embedded query; ties by ascending admission key."""
        if k < 1:
            raise InvalidParameterError(f"k must be at least 1, got {k}.")
        (query,) = self.corpus.encoder.embed([query_text])
        scores = self._cosines(query)
        keep = np.asarray([key not in exclude for key in self.corpus.keys], dtype=bool)
        candidates = np.flatnonzero(keep)
        order = np.lexsort((candidates, -scores[candidates]))[:k]
        return [
            TextRanked(self.corpus.keys[candidates[j]], float(scores[candidates[j]])) for j in order
        ]

    def score_candidates(self, target: str, candidates: Sequence[str]) -> list[float]:
        """Cosine between the target's report and each candidate report."""
        vectors = self.corpus.vectors
        anchor = vectors[self._position[target]]
        return [cosine(anchor, vectors[self._position[key]]) for key in candidates]


def rank_top_k_text(
    cohort: Cohort,
    query_text: str,
    k: int,
    provider: EmbeddingProvider,
    exclude_key: str | None = None,
) -> list[TextRanked]:
    """Rank every report of the cohort against a free-text query, excluding the query admission."""
    exclude = {exclude_key} if exclude_key is not None else set()
    return TextRanker(cohort, provider).rank(query_text, k, exclude)


def text_rankings_frame(query: str, ranked: Sequence[TextRanked]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "query_key": [query] * len(ranked),
            "rank": list(range(1, len(ranked) + 1)),
            "candidate_key": [r.admission_key for r in ranked],
            "score": [r.score for r in ranked],
        },
        schema={
            "query_key": pl.String,
            "rank": pl.Int64,
            "candidate_key": pl.String,
            "score": pl.Float64,
        },
    )
