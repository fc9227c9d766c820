"""EHR-based report ranker: per-modality Jaccard similarity, weighted aggregation, top-k search.

Top-k search runs over an inverted index from (code kind, code) to posting arrays of admission
positions. Intersection sizes are accumulated from the postings of the query's codes, so only
admissions sharing at least one code are ever scored.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple, Self

import numpy as np
import polars as pl
from pydantic import BaseModel, ConfigDict, Field, model_validator

from exprag.cohort import AdmissionRecord, Cohort, CodeKind
from exprag.segmenter import TaskKind

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1


class SimilarityWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_diag: float = Field(default=1 / 3, ge=0)
    lambda_med: float = Field(default=1 / 3, ge=0)
    lambda_proc: float = Field(default=1 / 3, ge=0)

    @model_validator(mode="after")
    def _one_positive(self) -> Self:
        if not (self.lambda_diag > 0 or self.lambda_med > 0 or self.lambda_proc > 0):
            raise ValueError("At least one similarity weight must be positive.")
        return self

    @classmethod
    def uniform(cls) -> Self:
        return cls(lambda_diag=1 / 3, lambda_med=1 / 3, lambda_proc=1 / 3)

    @classmethod
    def parse(cls, text: str) -> Self:
        """Parse the ``d,m,p`` command-line form."""
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"Expected three comma-separated weights, got {text!r}.")
        return cls(lambda_diag=parts[0], lambda_med=parts[1], lambda_proc=parts[2])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.lambda_diag, self.lambda_med, self.lambda_proc)

    def scaled(self, factor: float) -> Self:
        return type(self)(
            lambda_diag=self.lambda_diag * factor,
            lambda_med=self.lambda_med * factor,
            lambda_proc=self.lambda_proc * factor,
        )

    @property
    def total(self) -> float:
        return self.lambda_diag + self.lambda_med + self.lambda_proc


class WeightingStrategy(StrEnum):
    UNIFORM = "uniform"
    TASK_FOCUSED = "task_focused"
    COMPLEMENTARY = "complementary"


TASK_MODALITY: dict[TaskKind, CodeKind] = {
    TaskKind.DIAGNOSIS: CodeKind.DIAGNOSIS,
    TaskKind.MEDICATION: CodeKind.MEDICATION,
    TaskKind.INSTRUCTION: CodeKind.PROCEDURE,
}


def weights_for(strategy: WeightingStrategy, task: TaskKind) -> SimilarityWeights:
    """Weights of a weighting strategy for one task.

    Task-focused puts weight 1 on the task's modality; complementary puts weight 1 on the
    other two.
    """
    if strategy is WeightingStrategy.UNIFORM:
        return SimilarityWeights.uniform()
    relevant = TASK_MODALITY[task]
    on = 1.0 if strategy is WeightingStrategy.TASK_FOCUSED else 0.0
    off = 1.0 - on
    values = {kind: (on if kind is relevant else off) for kind in CodeKind}
    return SimilarityWeights(
        lambda_diag=values[CodeKind.DIAGNOSIS],
        lambda_med=values[CodeKind.MEDICATION],
        lambda_proc=values[CodeKind.PROCEDURE],
    )


class SimilarityScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    tau_diag: float = Field(ge=0, le=1)
    tau_med: float = Field(ge=0, le=1)
    tau_proc: float = Field(ge=0, le=1)
    tau: float

    @property
    def parts(self) -> tuple[float, float, float]:
        return (self.tau_diag, self.tau_med, self.tau_proc)


class RankParams(BaseModel):
    k: int = Field(default=15, ge=1)
    weights: SimilarityWeights = Field(default_factory=SimilarityWeights.uniform)
    exclude_same_subject: bool = True


class RankedAdmission(NamedTuple):
    admission_key: str
    score: SimilarityScore


def jaccard(a: frozenset[str] | set[str], b: frozenset[str] | set[str]) -> float:
    """Jaccard index |a ∩ b| / |a ∪ b|; two empty sets score 0."""
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def modality_similarity(p: AdmissionRecord, other: AdmissionRecord, kind: CodeKind) -> float:
    return jaccard(p.codes(kind), other.codes(kind))


def combined_similarity(parts: Sequence[float], w: SimilarityWeights) -> float:
    """Weighted sum of the diagnosis, medication and procedure similarities; weights are raw."""
    tau_diag, tau_med, tau_proc = parts
    return w.lambda_diag * tau_diag + w.lambda_med * tau_med + w.lambda_proc * tau_proc


def similarity(p: AdmissionRecord, other: AdmissionRecord, w: SimilarityWeights) -> SimilarityScore:
    parts = tuple(modality_similarity(p, other, kind) for kind in CodeKind)
    return SimilarityScore(
        tau_diag=parts[0], tau_med=parts[1], tau_proc=parts[2], tau=combined_similarity(parts, w)
    )


@dataclass(frozen=True)
class CodeIndex:
    """Inverted index over a cohort; immutable once built.

    Admissions are addressed by their position in the sorted key list, so posting arrays are
    sorted by admission key and index order doubles as the tie-break order.
    """

    keys: tuple[str, ...]
    position: dict[str, int]
    postings: dict[CodeKind, dict[str, np.ndarray]]
    sizes: dict[CodeKind, np.ndarray]

    def __len__(self) -> int:
        return len(self.keys)

    def posting(self, kind: CodeKind, code: str) -> list[str]:
        found = self.postings[kind].get(code)
        if found is None:
            return []
        return [self.keys[i] for i in found]

    def set_size(self, kind: CodeKind, admission_key: str) -> int:
        return int(self.sizes[kind][self.position[admission_key]])


def build_code_index(cohort: Cohort) -> CodeIndex:
    keys = tuple(cohort.keys)
    postings: dict[CodeKind, dict[str, np.ndarray]] = {}
    sizes: dict[CodeKind, np.ndarray] = {}
    for kind in CodeKind:
        lists: dict[str, list[int]] = {}
        kind_sizes = np.zeros(len(keys), dtype=np.int32)
        for i, key in enumerate(keys):
            codes = cohort.admissions[key].codes(kind)
            kind_sizes[i] = len(codes)
            for code in codes:
                lists.setdefault(code, []).append(i)
        postings[kind] = {
            code: np.asarray(members, dtype=np.int32) for code, members in sorted(lists.items())
        }
        sizes[kind] = kind_sizes
    logger.info(
        "Indexed %d admissions: %s postings.",
        len(keys),
        ", ".join(f"{len(postings[kind])} {kind}" for kind in CodeKind),
    )
    return CodeIndex(
        keys=keys, position={key: i for i, key in enumerate(keys)}, postings=postings, sizes=sizes
    )


def _excluded_keys(cohort: Cohort, query: AdmissionRecord, params: RankParams) -> set[str]:
    if params.exclude_same_subject:
        return {query.admission_key, *cohort.subject_admissions.get(query.subject_key, [])}
    return {query.admission_key}


def rank_top_k(
    index: CodeIndex, cohort: Cohort, query: str, params: RankParams | None = None
) -> list[RankedAdmission]:
    """Top-k most similar admissions to the query by weighted Jaccard similarity.

    Ties are broken by ascending admission key. Admissions sharing no code with the query are
    never returned.

    Raises:
        UnknownAdmissionError: If the query is not in the cohort.
    """
    params = params or RankParams()
    record = cohort.get(query)
    n = len(index)
    if n == 0:
        return []

    counts = np.zeros((len(CodeKind), n), dtype=np.int32)
    for row, kind in enumerate(CodeKind):
        hits = [index.postings[kind][c] for c in record.codes(kind) if c in index.postings[kind]]
        if hits:
            counts[row] = np.bincount(np.concatenate(hits), minlength=n)

    eligible = counts.any(axis=0)
    for key in _excluded_keys(cohort, record, params):
        i = index.position.get(key)
        if i is not None:
            eligible[i] = False
    candidates = np.flatnonzero(eligible)
    if candidates.size == 0:
        return []

    taus = []
    for row, kind in enumerate(CodeKind):
        inter = counts[row, candidates].astype(np.float64)
        union = len(record.codes(kind)) + index.sizes[kind][candidates] - counts[row, candidates]
        tau = np.zeros(candidates.size, dtype=np.float64)
        np.divide(inter, union, out=tau, where=union > 0)
        taus.append(tau)
    w = params.weights
    combined = w.lambda_diag * taus[0] + w.lambda_med * taus[1] + w.lambda_proc * taus[2]

    order = np.lexsort((candidates, -combined))[: params.k]
    return [
        RankedAdmission(
            index.keys[candidates[j]],
            SimilarityScore(
                tau_diag=float(taus[0][j]),
                tau_med=float(taus[1][j]),
                tau_proc=float(taus[2][j]),
                tau=float(combined[j]),
            ),
        )
        for j in order
    ]


def brute_force_rank(
    cohort: Cohort, query: str, params: RankParams | None = None
) -> list[RankedAdmission]:
    """Pairwise-scan counterpart of `rank_top_k` with the same eligibility and tie-breaking."""
    params = params or RankParams()
    record = cohort.get(query)
    excluded = _excluded_keys(cohort, record, params)
    scored: list[RankedAdmission] = []
    for key in cohort.keys:
        if key in excluded:
            continue
        other = cohort.admissions[key]
        if not any(record.codes(kind) & other.codes(kind) for kind in CodeKind):
            continue
        scored.append(RankedAdmission(key, similarity(record, other, params.weights)))
    scored.sort(key=lambda ranked: (-ranked.score.tau, ranked.admission_key))
    return scored[: params.k]


def rankings_frame(query: str, ranked: Sequence[RankedAdmission]) -> pl.DataFrame:
    return pl.DataFrame(
        {
            "query_key": [query] * len(ranked),
            "rank": list(range(1, len(ranked) + 1)),
            "candidate_key": [r.admission_key for r in ranked],
            "tau": [r.score.tau for r in ranked],
            "tau_diag": [r.score.tau_diag for r in ranked],
            "tau_med": [r.score.tau_med for r in ranked],
            "tau_proc": [r.score.tau_proc for r in ranked],
        },
        schema={
            "query_key": pl.String,
            "rank": pl.Int64,
            "candidate_key": pl.String,
            "tau": pl.Float64,
            "tau_diag": pl.Float64,
            "tau_med": pl.Float64,
            "tau_proc": pl.Float64,
        },
    )


def save_index(index: CodeIndex, path: Path) -> None:
    """Persist the index as a versioned ``.npz`` archive (one CSR block per code kind)."""
    arrays: dict[str, np.ndarray] = {
        "format_version": np.asarray([INDEX_FORMAT_VERSION], dtype=np.int32),
        "keys": np.asarray(index.keys, dtype=np.str_),
    }
    for kind in CodeKind:
        codes = list(index.postings[kind])
        members = [index.postings[kind][c] for c in codes]
        offsets = np.cumsum([0, *(len(m) for m in members)], dtype=np.int64)
        arrays[f"{kind}_codes"] = np.asarray(codes, dtype=np.str_)
        arrays[f"{kind}_offsets"] = offsets
        arrays[f"{kind}_indices"] = (
            np.concatenate(members) if members else np.zeros(0, dtype=np.int32)
        )
        arrays[f"{kind}_sizes"] = index.sizes[kind]
    with Path(path).open("wb") as f:
        np.savez_compressed(f, **arrays)
    logger.info("Saved code index of %d admissions to %s", len(index), path)


def load_index(path: Path) -> CodeIndex:
    with np.load(Path(path), allow_pickle=False) as data:
        version = int(data["format_version"][0])
        if version != INDEX_FORMAT_VERSION:
            raise ValueError(f"Index {path} has format version {version}, expected 1.")
        keys = tuple(str(k) for k in data["keys"])
        postings: dict[CodeKind, dict[str, np.ndarray]] = {}
        sizes: dict[CodeKind, np.ndarray] = {}
        for kind in CodeKind:
            codes = data[f"{kind}_codes"]
            offsets = data[f"{kind}_offsets"]
            indices = data[f"{kind}_indices"].astype(np.int32)
            postings[kind] = {
                str(code): indices[offsets[i] : offsets[i + 1]] for i, code in enumerate(codes)
            }
            sizes[kind] = data[f"{kind}_sizes"].astype(np.int32)
    return CodeIndex(
        keys=keys, position={key: i for i, key in enumerate(keys)}, postings=postings, sizes=sizes
    )
