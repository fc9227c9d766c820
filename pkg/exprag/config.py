from enum import StrEnum
from pathlib import Path
from typing import ClassVar, Self

from pydantic import BaseModel, Field

from exprag.cohort import DEFAULT_MAX_ENTRIES, DEFAULT_MIN_ENTRIES, CohortLayout
from exprag.harness import CorrelationSettings, HarnessSettings
from exprag.llm import ProviderSettings
from exprag.metrics import ContextMode
from exprag.qa import GenParams
from exprag.ranker import RankParams, SimilarityWeights, WeightingStrategy
from exprag.retriever import RetrievalMethod, RetrieverParams
from exprag.segmenter import TaskKind
from exprag.synth import SynthParams
from exprag.text_ranker import RemoteEmbeddingSettings
from utils.configs import YamlBaseModel


class RankerChoice(StrEnum):
    EHR = "ehr"
    TEXT_LEXICAL = "text-lexical"
    TEXT_REMOTE = "text-remote"


class PathsConfig(BaseModel):
    cohort_dir: Path = Field(
        default=Path("data/cohort"), description="Code tables and notes read by ingest."
    )
    cohort: Path = Path("artifacts/cohort.json.gz")
    index: Path = Path("artifacts/code_index.npz")
    segments: Path = Path("artifacts/segments.ndjson")
    rankings: Path = Path("artifacts/rankings.ndjson")
    hits: Path = Path("artifacts/hits.ndjson")
    dataset: Path = Path("artifacts/dischargeqa.ndjson")
    manifest: Path = Path("artifacts/dischargeqa_manifest.json")
    runs_dir: Path = Field(
        default=Path("artifacts/runs"), description="One timestamped directory per ask run."
    )
    reports_dir: Path = Path("artifacts/reports")


class CohortConfig(BaseModel):
    layout: CohortLayout = Field(default_factory=CohortLayout)
    filter: bool = True
    min_entries: int = Field(default=DEFAULT_MIN_ENTRIES, ge=0)
    max_entries: int = Field(default=DEFAULT_MAX_ENTRIES, ge=1)


class RankerConfig(BaseModel):
    choice: RankerChoice = RankerChoice.EHR
    k: int = Field(default=15, ge=1)
    weights: SimilarityWeights = Field(default_factory=SimilarityWeights.uniform)
    strategy: WeightingStrategy | None = Field(
        default=None, description="Task-dependent weights; overrides `weights` when set."
    )
    exclude_same_subject: bool = True

    def params(self) -> RankParams:
        return RankParams(
            k=self.k, weights=self.weights, exclude_same_subject=self.exclude_same_subject
        )


class TextRankerConfig(BaseModel):
    remote: RemoteEmbeddingSettings | None = Field(
        default=None, description="Embedding endpoint of the text-remote ranker."
    )


class HarnessConfig(BaseModel):
    modes: list[ContextMode] = Field(default_factory=lambda: list(ContextMode))
    tasks: list[TaskKind] = Field(default_factory=lambda: list(TaskKind))
    text_ranker: RankerChoice = Field(
        default=RankerChoice.TEXT_LEXICAL, description="Ranker behind the text_ranker mode."
    )


class SweepConfig(BaseModel):
    ks: list[int] = Field(default_factory=lambda: [5, 10, 15, 20, 25])
    strategies: list[WeightingStrategy] = Field(default_factory=lambda: list(WeightingStrategy))


class TrackingConfig(BaseModel):
    enabled: bool = False
    config_path: Path | None = Field(
        default=None, description="MLflow logger config; configs/mlflow_logger.yaml when unset."
    )


class RunConfig(YamlBaseModel):
    """Everything a command needs besides secrets, which come from the environment."""

    DEFAULT_CONFIG_PATH: ClassVar[Path] = Path("configs/run.yaml")

    paths: PathsConfig = Field(default_factory=PathsConfig)
    headers_path: Path | None = Field(
        default=None, description="Section header table; configs/headers.yaml when unset."
    )
    prompts_path: Path | None = Field(
        default=None, description="Prompt templates; configs/prompts.yaml when unset."
    )
    cohort: CohortConfig = Field(default_factory=CohortConfig)
    ranker: RankerConfig = Field(default_factory=RankerConfig)
    text_ranker: TextRankerConfig = Field(default_factory=TextRankerConfig)
    retriever: RetrieverParams = Field(default_factory=RetrieverParams)
    generation: GenParams = Field(default_factory=GenParams)
    llm_assist: bool = Field(
        default=False, description="Pick distractors and permute instructions with the provider."
    )
    provider: ProviderSettings = Field(default_factory=ProviderSettings)
    harness: HarnessConfig = Field(default_factory=HarnessConfig)
    correlation: CorrelationSettings = Field(default_factory=CorrelationSettings)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    synth: SynthParams = Field(default_factory=SynthParams)
    tracking: TrackingConfig = Field(default_factory=TrackingConfig)

    def harness_settings(self) -> HarnessSettings:
        return HarnessSettings(
            modes=self.harness.modes,
            tasks=self.harness.tasks,
            rank=self.ranker.params(),
            weighting=self.ranker.strategy,
            retriever=self.retriever,
        )

    def with_overrides(
        self,
        seed: int | None = None,
        k: int | None = None,
        weights: str | None = None,
        ranker: str | None = None,
        retriever: str | None = None,
        provider: str | None = None,
        counts: str | None = None,
        subjects: int | None = None,
    ) -> Self:
        """A copy with command-line flag values applied; ``None`` leaves a value unchanged.

        ``--seed`` reseeds generation, synthesis and correlation sampling together.
        ``counts`` lists per-task item counts as ``diagnosis,medication,instruction``.

        Raises:
            ValueError: If ``weights`` or ``counts`` is malformed.
        """
        data = self.model_dump()
        if seed is not None:
            data["generation"]["seed"] = seed
            data["synth"]["seed"] = seed
            data["correlation"]["seed"] = seed
        if k is not None:
            data["ranker"]["k"] = k
        if weights is not None:
            data["ranker"]["weights"] = SimilarityWeights.parse(weights).model_dump()
            data["ranker"]["strategy"] = None
        if ranker is not None:
            data["ranker"]["choice"] = RankerChoice(ranker)
        if retriever is not None:
            data["retriever"]["method"] = RetrievalMethod(retriever)
        if provider is not None:
            data["provider"]["spec"] = provider
        if counts is not None:
            values = [int(part) for part in counts.split(",")]
            if len(values) != len(TaskKind):
                raise ValueError(f"--counts needs {len(TaskKind)} values, got {counts!r}.")
            data["generation"]["counts"] = dict(zip(TaskKind, values, strict=True))
        if subjects is not None:
            data["synth"]["n_subjects"] = subjects
        return type(self).model_validate(data)
