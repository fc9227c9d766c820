"""Experiment harnesses: QA evaluation per context mode, top-k and weighting sweeps, and the
ranker-correlation study."""

import logging
import random
from abc import ABC, abstractmethod
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import NamedTuple, override

import polars as pl
from pydantic import BaseModel, ConfigDict, Field
from rich.table import Table

from exprag.cohort import AdmissionRecord, Cohort, CodeKind
from exprag.exceptions import (
    AuthRejectedError,
    ContextTooLongError,
    InsufficientPoolError,
    InvalidParameterError,
    ProviderFailureError,
    TransientTransportError,
    TransportError,
    UndefinedCorrelationError,
)
from exprag.llm import (
    ChatProvider,
    ParsedAnswer,
    PromptLibrary,
    ProviderSettings,
    QuestionContext,
    TranscriptRecord,
    complete,
    parse_answer,
    prompt_hash,
    render_prompt,
)
from exprag.metrics import ContextMode, EvalRecord, pearson, spearman
from exprag.qa import QAItem
from exprag.ranker import (
    CodeIndex,
    RankParams,
    SimilarityWeights,
    WeightingStrategy,
    build_code_index,
    combined_similarity,
    modality_similarity,
    rank_top_k,
    similarity,
    weights_for,
)
from exprag.retriever import RetrieverParams, pack_context, retrieve
from exprag.segmenter import TaskKind
from exprag.text_ranker import EmbeddingProvider, TextRanker

logger = logging.getLogger(__name__)

_MODE_ORDER = {mode: i for i, mode in enumerate(ContextMode)}
_TASK_ORDER = {task: i for i, task in enumerate(TaskKind)}


class HarnessSettings(BaseModel):
    modes: list[ContextMode] = Field(default_factory=lambda: list(ContextMode))
    tasks: list[TaskKind] = Field(default_factory=lambda: list(TaskKind))
    rank: RankParams = Field(default_factory=RankParams)
    weighting: WeightingStrategy | None = Field(
        default=None, description="Task-dependent weights; overrides rank.weights when set."
    )
    retriever: RetrieverParams = Field(default_factory=RetrieverParams)


class MetricsCell(BaseModel):
    model: str
    task: TaskKind
    context_mode: ContextMode
    n: int
    accuracy: float = Field(ge=0, le=100)
    f1: float = Field(ge=0, le=1)
    invalid_rate: float = Field(ge=0, le=1)


class MetricsReport(BaseModel):
    """Accuracy, macro-F1 and invalid rate per (task, context mode)."""

    cells: list[MetricsCell] = Field(default_factory=list)

    @classmethod
    def from_records(cls, records: Sequence[EvalRecord], model: str) -> "MetricsReport":
        if not records:
            return cls()
        frame = pl.DataFrame(
            {
                "task": [str(r.task) for r in records],
                "context_mode": [str(r.context_mode) for r in records],
                "task_order": [_TASK_ORDER[r.task] for r in records],
                "mode_order": [_MODE_ORDER[r.context_mode] for r in records],
                "exact": [float(r.is_exact) for r in records],
                "f1": [r.f1 for r in records],
                "invalid": [float(not r.parsed.is_valid) for r in records],
            }
        )
        grouped = (
            frame.group_by("task_order", "mode_order", "task", "context_mode")
            .agg(
                pl.len().alias("n"),
                (pl.col("exact").mean() * 100).alias("accuracy"),
                pl.col("f1").mean().alias("f1"),
                pl.col("invalid").mean().alias("invalid_rate"),
            )
            .sort("task_order", "mode_order")
        )
        return cls(
            cells=[
                MetricsCell(
                    model=model,
                    task=row["task"],
                    context_mode=row["context_mode"],
                    n=row["n"],
                    accuracy=row["accuracy"],
                    f1=row["f1"],
                    invalid_rate=row["invalid_rate"],
                )
                for row in grouped.iter_rows(named=True)
            ]
        )

    def cell(self, task: TaskKind, mode: ContextMode) -> MetricsCell | None:
        return next((c for c in self.cells if c.task is task and c.context_mode is mode), None)

    def frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            [cell.model_dump(mode="json") for cell in self.cells],
            schema={
                "model": pl.String,
                "task": pl.String,
                "context_mode": pl.String,
                "n": pl.Int64,
                "accuracy": pl.Float64,
                "f1": pl.Float64,
                "invalid_rate": pl.Float64,
            },
        )

    def write(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame().write_ndjson(path)

    @classmethod
    def read(cls, path: Path) -> "MetricsReport":
        if Path(path).stat().st_size == 0:
            return cls()
        return cls(cells=[MetricsCell.model_validate(r) for r in pl.read_ndjson(path).to_dicts()])

    def table(self, title: str = "DischargeQA") -> Table:
        """Model x context mode rows, one Acc / F1 column per task."""
        tasks = [task for task in TaskKind if any(c.task is task for c in self.cells)]
        table = Table(title=title)
        table.add_column("Model")
        table.add_column("Context")
        for task in tasks:
            table.add_column(f"{task} Acc(%) / F1", justify="right")
        rows = sorted(
            {(c.model, c.context_mode) for c in self.cells},
            key=lambda r: (r[0], _MODE_ORDER[r[1]]),
        )
        for model, mode in rows:
            values = []
            for task in tasks:
                cell = next(
                    (
                        c
                        for c in self.cells
                        if (c.model, c.context_mode, c.task) == (model, mode, task)
                    ),
                    None,
                )
                values.append(f"{cell.accuracy:.1f} / {cell.f1:.3f}" if cell else "-")
            table.add_row(model, str(mode), *values)
        return table


class HarnessResult(NamedTuple):
    records: list[EvalRecord]
    transcript: list[TranscriptRecord]
    report: MetricsReport

    @property
    def failed(self) -> int:
        return sum(record.error is not None for record in self.transcript)


RECORD_SCHEMA = {
    "question_id": pl.String,
    "task": pl.String,
    "context_mode": pl.String,
    "gold_letters": pl.List(pl.String),
    "parsed": pl.Struct({"letters": pl.List(pl.String), "invalid": pl.String}),
}

TRANSCRIPT_SCHEMA = {
    "question_id": pl.String,
    "context_mode": pl.String,
    "provider": pl.String,
    "prompt_hash": pl.String,
    "response_text": pl.String,
    "attempts": pl.Int64,
    "latency_s": pl.Float64,
    "error": pl.String,
}


def write_records(records: Sequence[EvalRecord], path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows = [record.model_dump(mode="json") for record in records]
    pl.DataFrame(rows, schema=RECORD_SCHEMA).write_ndjson(path)


def read_records(path: Path) -> list[EvalRecord]:
    if Path(path).stat().st_size == 0:
        return []
    frame = pl.read_ndjson(path, schema=RECORD_SCHEMA)
    return [EvalRecord.model_validate(row) for row in frame.to_dicts()]


def write_transcript(transcript: Sequence[TranscriptRecord], path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows = [entry.model_dump(mode="json") for entry in transcript]
    pl.DataFrame(rows, schema=TRANSCRIPT_SCHEMA).write_ndjson(path)


class _Job(NamedTuple):
    item: QAItem
    mode: ContextMode
    context: str


class ContextBuilder:
    """Builds the retrieval context of a question for each context mode."""

    def __init__(
        self,
        cohort: Cohort,
        settings: HarnessSettings,
        index: CodeIndex | None = None,
        embedding: EmbeddingProvider | None = None,
    ):
        self.cohort = cohort
        self.settings = settings
        self._index = index
        self._text_ranker = TextRanker(cohort, embedding) if embedding is not None else None

    @property
    def index(self) -> CodeIndex:
        if self._index is None:
            self._index = build_code_index(self.cohort)
        return self._index

    def rank_params(self, task: TaskKind) -> RankParams:
        if self.settings.weighting is None:
            return self.settings.rank
        return self.settings.rank.model_copy(
            update={"weights": weights_for(self.settings.weighting, task)}
        )

    def selected_reports(self, item: QAItem, mode: ContextMode) -> dict[str, str]:
        """Notes of the admissions a context mode selects for the question.

        Raises:
            InvalidParameterError: If the text-ranker mode has no embedding provider.
        """
        params = self.rank_params(item.task)
        if mode is ContextMode.EXPRAG_EHR:
            ranked = rank_top_k(self.index, self.cohort, item.admission_key, params)
            keys = [r.admission_key for r in ranked]
        elif mode is ContextMode.TEXT_RANKER:
            if self._text_ranker is None:
                raise InvalidParameterError(
                    "The text_ranker context mode needs an embedding provider."
                )
            record = self.cohort.get(item.admission_key)
            exclude = {item.admission_key}
            if params.exclude_same_subject:
                exclude.update(self.cohort.subject_admissions.get(record.subject_key, []))
            text_ranked = self._text_ranker.rank(item.ranking_query(), params.k, exclude)
            keys = [r.admission_key for r in text_ranked]
        else:
            return {}
        return {key: note for key in keys if (note := self.cohort.admissions[key].note)}

    def context(self, item: QAItem, mode: ContextMode) -> str:
        reports = self.selected_reports(item, mode)
        if not reports:
            return ""
        retriever = self.settings.retriever
        hits = retrieve(reports, item.retrieval_query(), retriever.method, retriever)
        return pack_context(hits, retriever.context_budget)


def _ask(
    job: _Job, provider: ChatProvider, provider_settings: ProviderSettings, library: PromptLibrary
) -> tuple[EvalRecord, TranscriptRecord]:
    messages = render_prompt(job.item, job.context, library)
    request = provider_settings.request(messages, QuestionContext.of(job.item, job.context))
    digest = prompt_hash(messages)
    retries = provider_settings.retry.max_attempts
    try:
        exchange = complete(request, provider, provider_settings.retry)
    except (TransportError, AuthRejectedError, ContextTooLongError, ProviderFailureError) as e:
        logger.warning("Question %s (%s) failed: %s", job.item.question_id, job.mode, e)
        parsed = ParsedAnswer.invalid_because("transport")
        transcript = TranscriptRecord(
            question_id=job.item.question_id,
            context_mode=job.mode,
            provider=provider.name,
            prompt_hash=digest,
            response_text=None,
            attempts=retries if isinstance(e, TransientTransportError) else 1,
            latency_s=0.0,
            error=f"{type(e).__name__}: {e}",
        )
    else:
        parsed = parse_answer(exchange.response.text, job.item.mode, job.item.n_options)
        transcript = TranscriptRecord(
            question_id=job.item.question_id,
            context_mode=job.mode,
            provider=provider.name,
            prompt_hash=digest,
            response_text=exchange.response.text,
            attempts=exchange.attempts,
            latency_s=exchange.response.latency_s,
        )
    record = EvalRecord(
        question_id=job.item.question_id,
        task=job.item.task,
        context_mode=job.mode,
        gold_letters=job.item.gold_letters,
        parsed=parsed,
    )
    return record, transcript


def run_qa_harness(
    items: Sequence[QAItem],
    cohort: Cohort,
    provider: ChatProvider,
    settings: HarnessSettings | None = None,
    provider_settings: ProviderSettings | None = None,
    embedding: EmbeddingProvider | None = None,
    index: CodeIndex | None = None,
    library: PromptLibrary | None = None,
) -> HarnessResult:
    """Answer every question under every context mode and aggregate the metrics.

    Contexts are built up front in item order; chat requests then run with at most
    ``provider_settings.max_in_flight`` in flight. Provider errors become ``Invalid("transport")``.
    """
    settings = settings or HarnessSettings()
    provider_settings = provider_settings or ProviderSettings()
    library = library or PromptLibrary()
    builder = ContextBuilder(cohort, settings, index, embedding)

    jobs = [
        _Job(item, mode, builder.context(item, mode))
        for item in items
        if item.task in settings.tasks
        for mode in settings.modes
    ]
    logger.info("Asking %d questions x modes with %s", len(jobs), provider.name)
    with ThreadPoolExecutor(max_workers=provider_settings.max_in_flight) as pool:
        answered = list(
            pool.map(lambda job: _ask(job, provider, provider_settings, library), jobs)
        )

    answered.sort(key=lambda pair: (pair[0].question_id, _MODE_ORDER[pair[0].context_mode]))
    records = [record for record, _ in answered]
    transcript = [entry for _, entry in answered]
    report = MetricsReport.from_records(records, provider.name)
    return HarnessResult(records, transcript, report)


class SweepRow(BaseModel):
    value: str
    task: TaskKind
    n: int
    accuracy: float
    f1: float
    invalid_rate: float


class SweepReport(BaseModel):
    parameter: str
    rows: list[SweepRow] = Field(default_factory=list)

    def frame(self) -> pl.DataFrame:
        rows = [{"parameter": self.parameter, **row.model_dump(mode="json")} for row in self.rows]
        return pl.DataFrame(
            rows,
            schema={
                "parameter": pl.String,
                "value": pl.String,
                "task": pl.String,
                "n": pl.Int64,
                "accuracy": pl.Float64,
                "f1": pl.Float64,
                "invalid_rate": pl.Float64,
            },
        )

    def write(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame().write_ndjson(path)

    @classmethod
    def read(cls, path: Path) -> "SweepReport":
        rows = pl.read_ndjson(path).to_dicts() if Path(path).stat().st_size else []
        parameter = rows[0]["parameter"] if rows else Path(path).stem
        return cls(
            parameter=parameter,
            rows=[
                SweepRow.model_validate({k: v for k, v in r.items() if k != "parameter"})
                for r in rows
            ],
        )

    def accuracy(self, value: str, task: TaskKind) -> float | None:
        return next((r.accuracy for r in self.rows if r.value == value and r.task is task), None)

    def table(self) -> Table:
        tasks = [task for task in TaskKind if any(r.task is task for r in self.rows)]
        table = Table(title=f"ExpRAG accuracy by {self.parameter}")
        table.add_column(self.parameter)
        for task in tasks:
            table.add_column(f"{task} Acc(%)", justify="right")
        for value in dict.fromkeys(r.value for r in self.rows):
            cells = [self.accuracy(value, task) for task in tasks]
            table.add_row(value, *(f"{c:.1f}" if c is not None else "-" for c in cells))
        return table


def _sweep_rows(value: str, report: MetricsReport) -> list[SweepRow]:
    return [
        SweepRow(
            value=value,
            task=cell.task,
            n=cell.n,
            accuracy=cell.accuracy,
            f1=cell.f1,
            invalid_rate=cell.invalid_rate,
        )
        for cell in report.cells
    ]


def run_topk_sweep(
    items: Sequence[QAItem],
    cohort: Cohort,
    provider: ChatProvider,
    ks: Sequence[int] = (5, 10, 15, 20, 25),
    settings: HarnessSettings | None = None,
    provider_settings: ProviderSettings | None = None,
    library: PromptLibrary | None = None,
) -> SweepReport:
    """ExpRAG accuracy for each number of selected reports."""
    settings = settings or HarnessSettings()
    index = build_code_index(cohort)
    report = SweepReport(parameter="k")
    for k in ks:
        run_settings = settings.model_copy(
            update={
                "modes": [ContextMode.EXPRAG_EHR],
                "rank": settings.rank.model_copy(update={"k": k}),
            }
        )
        result = run_qa_harness(
            items, cohort, provider, run_settings, provider_settings, index=index, library=library
        )
        report.rows.extend(_sweep_rows(str(k), result.report))
        logger.info("k=%d done (%d records).", k, len(result.records))
    return report


def run_weighting_sweep(
    items: Sequence[QAItem],
    cohort: Cohort,
    provider: ChatProvider,
    strategies: Sequence[WeightingStrategy] = tuple(WeightingStrategy),
    settings: HarnessSettings | None = None,
    provider_settings: ProviderSettings | None = None,
    library: PromptLibrary | None = None,
) -> SweepReport:
    """ExpRAG accuracy for each weighting strategy, with task-dependent weights."""
    settings = settings or HarnessSettings()
    index = build_code_index(cohort)
    report = SweepReport(parameter="weighting")
    for strategy in strategies:
        run_settings = settings.model_copy(
            update={"modes": [ContextMode.EXPRAG_EHR], "weighting": strategy}
        )
        result = run_qa_harness(
            items, cohort, provider, run_settings, provider_settings, index=index, library=library
        )
        report.rows.extend(_sweep_rows(str(strategy), result.report))
    return report


class PairAnnotator(ABC):
    """Ground-truth similarity of two admissions, one score in [0, 1] per modality."""

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @abstractmethod
    def annotate(
        self, target: AdmissionRecord, candidate: AdmissionRecord, cohort: Cohort
    ) -> tuple[float, float, float]:
        pass

    def score(self, target: AdmissionRecord, candidate: AdmissionRecord, cohort: Cohort) -> float:
        """Mean of the three modality scores."""
        parts = self.annotate(target, candidate, cohort)
        return combined_similarity(parts, SimilarityWeights.uniform())


class EhrOracleAnnotator(PairAnnotator):
    """Exact code-set overlap; with uniform weights it reproduces the EHR ranker's scores."""

    @property
    @override
    def name(self) -> str:
        return "ehr-oracle"

    @override
    def annotate(
        self, target: AdmissionRecord, candidate: AdmissionRecord, cohort: Cohort
    ) -> tuple[float, float, float]:
        d, m, p = (modality_similarity(target, candidate, kind) for kind in CodeKind)
        return d, m, p


class ConstantAnnotator(PairAnnotator):
    def __init__(self, value: float = 0.5):
        self.value = value

    @property
    @override
    def name(self) -> str:
        return f"constant:{self.value}"

    @override
    def annotate(
        self, target: AdmissionRecord, candidate: AdmissionRecord, cohort: Cohort
    ) -> tuple[float, float, float]:
        return self.value, self.value, self.value


class PairScorer(ABC):
    """A ranker's similarity between a target and each candidate admission."""

    @property
    @abstractmethod
    def name(self) -> str:
        pass

    @abstractmethod
    def scores(self, target: str, candidates: Sequence[str]) -> list[float]:
        pass


class EhrPairScorer(PairScorer):
    def __init__(self, cohort: Cohort, weights: SimilarityWeights | None = None):
        self.cohort = cohort
        self.weights = weights or SimilarityWeights.uniform()

    @property
    @override
    def name(self) -> str:
        return "ehr"

    @override
    def scores(self, target: str, candidates: Sequence[str]) -> list[float]:
        record = self.cohort.get(target)
        return [similarity(record, self.cohort.get(key), self.weights).tau for key in candidates]


class TextPairScorer(PairScorer):
    def __init__(self, ranker: TextRanker, name: str = "text-lexical"):
        self.ranker = ranker
        self._name = name

    @property
    @override
    def name(self) -> str:
        return self._name

    @override
    def scores(self, target: str, candidates: Sequence[str]) -> list[float]:
        return self.ranker.score_candidates(target, candidates)


class CorrelationSettings(BaseModel):
    n_targets: int = Field(default=100, ge=1)
    n_random: int = Field(default=20, ge=0)
    n_pool: int = Field(default=80, ge=0)
    seed: int = 0
    strict: bool = Field(default=False, description="Raise instead of recording pool shortfalls.")
    annotator: str = Field(
        default="ehr-oracle", description="ehr-oracle, constant:<value> or llm."
    )


class TargetCorrelation(BaseModel):
    model_config = ConfigDict(frozen=True)

    target: str
    ranker: str
    n_candidates: int
    pearson: float | None
    spearman: float | None


class RankerCorrelation(BaseModel):
    ranker: str
    mean_pearson: float | None
    mean_spearman: float | None
    n_targets: int
    excluded_pearson: int
    excluded_spearman: int


class PoolShortfall(BaseModel):
    target: str
    available: int
    requested: int


class CorrelationReport(BaseModel):
    annotator: str
    rankers: list[RankerCorrelation] = Field(default_factory=list)
    targets: list[TargetCorrelation] = Field(default_factory=list)
    shortfalls: list[PoolShortfall] = Field(default_factory=list)

    @classmethod
    def read(cls, path: Path) -> "CorrelationReport":
        """Per-ranker summary rows only; per-target values are not persisted."""
        rows = pl.read_ndjson(path).to_dicts() if Path(path).stat().st_size else []
        annotator = rows[0]["annotator"] if rows else "unknown"
        return cls(
            annotator=annotator,
            rankers=[
                RankerCorrelation.model_validate({k: v for k, v in r.items() if k != "annotator"})
                for r in rows
            ],
        )

    def ranker(self, name: str) -> RankerCorrelation:
        return next(r for r in self.rankers if r.ranker == name)

    def frame(self) -> pl.DataFrame:
        return pl.DataFrame(
            [{"annotator": self.annotator, **r.model_dump()} for r in self.rankers],
            schema={
                "annotator": pl.String,
                "ranker": pl.String,
                "mean_pearson": pl.Float64,
                "mean_spearman": pl.Float64,
                "n_targets": pl.Int64,
                "excluded_pearson": pl.Int64,
                "excluded_spearman": pl.Int64,
            },
        )

    def write(self, path: Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self.frame().write_ndjson(path)

    def table(self) -> Table:
        table = Table(title=f"Ranker correlation with {self.annotator}")
        for column in ("Ranker", "Pearson", "Spearman", "Targets", "Excluded"):
            table.add_column(column, justify="left" if column == "Ranker" else "right")
        for r in self.rankers:
            table.add_row(
                r.ranker,
                "-" if r.mean_pearson is None else f"{r.mean_pearson:.3f}",
                "-" if r.mean_spearman is None else f"{r.mean_spearman:.3f}",
                str(r.n_targets),
                f"{r.excluded_pearson}/{r.excluded_spearman}",
            )
        return table


def _restricted_pool(index: CodeIndex, record: AdmissionRecord) -> set[str]:
    pool: set[str] = set()
    for kind in CodeKind:
        for code in record.codes(kind):
            pool.update(index.posting(kind, code))
    return pool


def sample_candidates(
    cohort: Cohort,
    index: CodeIndex,
    target: str,
    settings: CorrelationSettings,
    rng: random.Random,
    eligible: Sequence[str],
) -> tuple[list[str], PoolShortfall | None]:
    """Uniform candidates plus candidates sharing at least one code with the target.

    Raises:
        InsufficientPoolError: If the restricted pool is short and ``settings.strict`` is set.
    """
    record = cohort.get(target)
    own = set(cohort.subject_admissions.get(record.subject_key, [])) | {target}
    others = [key for key in eligible if key not in own]
    uniform = sorted(rng.sample(others, min(settings.n_random, len(others))))
    taken = set(uniform)
    allowed = set(eligible)
    pool = sorted((_restricted_pool(index, record) & allowed) - own - taken)
    shortfall = None
    if len(pool) < settings.n_pool:
        if settings.strict:
            raise InsufficientPoolError(target, len(pool), settings.n_pool)
        shortfall = PoolShortfall(target=target, available=len(pool), requested=settings.n_pool)
    pooled = sorted(rng.sample(pool, min(settings.n_pool, len(pool))))
    return uniform + pooled, shortfall


def _mean(values: Sequence[float]) -> float | None:
    return sum(values) / len(values) if values else None


def run_correlation_harness(
    cohort: Cohort,
    rankers: Sequence[PairScorer],
    annotator: PairAnnotator,
    settings: CorrelationSettings | None = None,
) -> CorrelationReport:
    """Correlate each ranker's scores with annotator scores over sampled candidate sets.

    Raises:
        InsufficientPoolError: If a target's restricted pool is short and the settings are strict.
    """
    settings = settings or CorrelationSettings()
    rng = random.Random(settings.seed)
    index = build_code_index(cohort)
    eligible = [key for key in cohort.keys if cohort.admissions[key].has_note]
    targets = sorted(rng.sample(eligible, min(settings.n_targets, len(eligible))))

    report = CorrelationReport(annotator=annotator.name)
    per_ranker: dict[str, tuple[list[float], list[float], list[int]]] = {
        r.name: ([], [], [0, 0]) for r in rankers
    }
    for target in targets:
        candidates, shortfall = sample_candidates(cohort, index, target, settings, rng, eligible)
        if shortfall is not None:
            report.shortfalls.append(shortfall)
        record = cohort.get(target)
        truth = [annotator.score(record, cohort.get(key), cohort) for key in candidates]
        for ranker in rankers:
            predicted = ranker.scores(target, candidates)
            pearsons, spearmans, excluded = per_ranker[ranker.name]
            values: list[float | None] = []
            for i, correlate in enumerate((pearson, spearman)):
                try:
                    value = correlate(predicted, truth)
                except UndefinedCorrelationError:
                    excluded[i] += 1
                    values.append(None)
                    continue
                (pearsons, spearmans)[i].append(value)
                values.append(value)
            report.targets.append(
                TargetCorrelation(
                    target=target,
                    ranker=ranker.name,
                    n_candidates=len(candidates),
                    pearson=values[0],
                    spearman=values[1],
                )
            )

    for ranker in rankers:
        pearsons, spearmans, excluded = per_ranker[ranker.name]
        report.rankers.append(
            RankerCorrelation(
                ranker=ranker.name,
                mean_pearson=_mean(pearsons),
                mean_spearman=_mean(spearmans),
                n_targets=len(targets),
                excluded_pearson=excluded[0],
                excluded_spearman=excluded[1],
            )
        )
    if report.shortfalls:
        logger.warning(
            "%d targets had a restricted pool below %d.", len(report.shortfalls), settings.n_pool
        )
    return report
