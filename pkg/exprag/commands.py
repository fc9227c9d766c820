"""Command-line entry point: one sub-command per pipeline stage, each persisting its output."""

import logging
from argparse import Namespace
from collections.abc import Callable, Sequence
from datetime import datetime
from pathlib import Path

import polars as pl
from pydantic import BaseModel
from rich.console import Console
from rich.table import Table

from exprag.cohort import Cohort, filter_admissions, ingest_directory, load_cohort, save_cohort
from exprag.config import RankerChoice, RunConfig
from exprag.exceptions import (
    AuthRejectedError,
    ContextTooLongError,
    ExpRagError,
    InvalidParameterError,
    ProviderFailureError,
    TransportError,
    UnknownAdmissionError,
    UnknownMethodError,
)
from exprag.harness import (
    ConstantAnnotator,
    ContextBuilder,
    CorrelationReport,
    EhrOracleAnnotator,
    EhrPairScorer,
    MetricsReport,
    PairAnnotator,
    PairScorer,
    SweepReport,
    TextPairScorer,
    read_records,
    run_correlation_harness,
    run_qa_harness,
    run_topk_sweep,
    run_weighting_sweep,
    write_records,
    write_transcript,
)
from exprag.llm import PromptLibrary, provider_from_spec
from exprag.llm_assist import LlmAnnotator, LlmDistractorSelector, LlmPermuter
from exprag.metrics import ContextMode, mean_relative_improvement, relative_improvement
from exprag.qa import build_dataset, read_dataset, write_dataset, write_manifest
from exprag.ranker import (
    CodeIndex,
    build_code_index,
    load_index,
    rank_top_k,
    rankings_frame,
    save_index,
)
from exprag.retriever import RetrievalMethod, hits_frame, retrieve
from exprag.segmenter import HeaderTable, TaskKind, segment_note
from exprag.synth import gen_cohort
from exprag.text_ranker import (
    EmbeddingProvider,
    LexicalTfidfProvider,
    RemoteEmbeddingProvider,
    TextRanker,
    text_rankings_frame,
)
from utils.commands import argument, build_parser, command, dispatch
from utils.configs import MlflowLoggerConfig
from utils.configs_provider import ConfigProvider
from utils.exceptions import (
    CommandError,
    ConfigInvalidError,
    MissingInputError,
    PartialRunError,
    ProviderExitError,
)
from utils.experiment_logger import MlflowLogger
from utils.logger import setup_logger

logger = logging.getLogger(__name__)

COMMON_ARGUMENTS = (
    argument("--seed", type=int, help="Seed of generation, synthesis and sampling."),
    argument("--k", type=int, help="Number of reports the ranker selects."),
    argument("--weights", help="Modality weights as d,m,p."),
    argument("--ranker", choices=[c.value for c in RankerChoice], help="Report ranker."),
    argument(
        "--retriever", choices=[m.value for m in RetrievalMethod], help="Passage retriever."
    ),
    argument(
        "--provider",
        help="mock:echo-gold, mock:fixed-letter:<L>, mock:context-aware or http.",
    ),
    argument("--counts", help="Item counts per task as diagnosis,medication,instruction."),
    argument("--out", type=Path, help="Primary output path of the command."),
)

RUN_ARGUMENT = argument("--run", type=Path, help="Run directory; the latest run when omitted.")

SEGMENT_SCHEMA = {
    "admission_key": pl.String,
    "section": pl.String,
    "phase": pl.String,
    "header": pl.String,
    "start": pl.Int64,
    "body_start": pl.Int64,
    "end": pl.Int64,
}

console = Console()


class RunManifest(BaseModel):
    provider: str
    dataset: str
    created: str
    questions: int
    requests: int
    failed: int


def _configured(config: RunConfig, args: Namespace) -> RunConfig:
    try:
        return config.with_overrides(
            seed=args.seed,
            k=args.k,
            weights=args.weights,
            ranker=args.ranker,
            retriever=args.retriever,
            provider=args.provider,
            counts=args.counts,
            subjects=getattr(args, "subjects", None),
        )
    except ValueError as e:
        raise ConfigInvalidError(f"Invalid flag value: {e}") from e


def _require(path: Path, producer: str) -> Path:
    if not Path(path).exists():
        raise MissingInputError(f"{path} not found; run `{producer}` first.")
    return Path(path)


def _load_cohort(config: RunConfig) -> Cohort:
    return load_cohort(_require(config.paths.cohort, "ingest"))


def _index(config: RunConfig, cohort: Cohort) -> CodeIndex:
    if config.paths.index.exists():
        index = load_index(config.paths.index)
        if len(index) == cohort.size:
            return index
        logger.warning("Index %s does not match the cohort; rebuilding.", config.paths.index)
    return build_code_index(cohort)


def _headers(config: RunConfig) -> HeaderTable:
    if config.headers_path is not None:
        return HeaderTable.from_yaml(config.headers_path)
    return ConfigProvider().headers


def _prompts(config: RunConfig) -> PromptLibrary:
    if config.prompts_path is not None:
        return PromptLibrary.from_yaml(config.prompts_path)
    return ConfigProvider().prompts


def _api_key() -> str | None:
    key = ConfigProvider().global_config.api_key
    return key.get_secret_value() if key is not None else None


def _embedding_provider(config: RunConfig, choice: RankerChoice) -> EmbeddingProvider:
    if choice is not RankerChoice.TEXT_REMOTE:
        return LexicalTfidfProvider()
    if config.text_ranker.remote is None:
        raise ConfigInvalidError("The text-remote ranker needs text_ranker.remote settings.")
    global_config = ConfigProvider().global_config
    key = global_config.embedding_api_key or global_config.api_key
    return RemoteEmbeddingProvider(
        config.text_ranker.remote, key.get_secret_value() if key is not None else None
    )


def _write_frame(frame: pl.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.write_ndjson(path)
    logger.info("Wrote %d rows to %s", frame.height, path)
    return path


def _latest_run(config: RunConfig, run: Path | None) -> Path:
    if run is not None:
        return _require(Path(run) / "records.ndjson", "ask").parent
    runs_dir = config.paths.runs_dir
    runs = sorted(p for p in runs_dir.glob("*") if (p / "records.ndjson").exists())
    if not runs:
        raise MissingInputError(f"No run under {runs_dir}; run `ask` first.")
    return runs[-1]


def _track(config: RunConfig, log: Callable[[MlflowLogger], None]) -> None:
    if not config.tracking.enabled:
        return
    path = config.tracking.config_path
    mlflow_config = (
        MlflowLoggerConfig.from_yaml(path) if path is not None else ConfigProvider().mlflow_configs
    )
    with MlflowLogger(mlflow_config) as tracker:
        tracker.log_params_flat(config.model_dump(mode="json"))
        log(tracker)


@command(
    help="Generate a synthetic cohort as ingest-ready files.",
    arguments=(argument("--subjects", type=int, help="Number of synthetic subjects."),),
)
def synth(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    out = args.out or config.paths.cohort_dir
    synthetic = gen_cohort(config.synth, out, config.cohort.layout)
    logger.info(
        "Synthesized %d admissions in %d clusters (%d planted violations) into %s",
        synthetic.cohort.size,
        config.synth.n_clusters,
        len(synthetic.violations),
        out,
    )


@command(help="Parse code tables and notes, filter admissions, build the code index.")
def ingest(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    cohort = ingest_directory(_require(config.paths.cohort_dir, "synth"), config.cohort.layout)
    if config.cohort.filter:
        cohort = filter_admissions(cohort, config.cohort.min_entries, config.cohort.max_entries)
    out = Path(args.out or config.paths.cohort)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(cohort, out)
    config.paths.index.parent.mkdir(parents=True, exist_ok=True)
    save_index(build_code_index(cohort), config.paths.index)


@command(help="Split every note into canonical sections and export the spans.")
def segment(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    cohort = _load_cohort(config)
    headers = _headers(config)
    rows = []
    for key in cohort.keys:
        note = cohort.admissions[key].note
        if not note:
            continue
        for span in segment_note(note, headers, key).spans:
            rows.append(
                {
                    "admission_key": key,
                    "section": span.kind.value,
                    "phase": span.kind.phase.value,
                    "header": span.header,
                    "start": span.start,
                    "body_start": span.body_start,
                    "end": span.end,
                }
            )
    _write_frame(pl.DataFrame(rows, schema=SEGMENT_SCHEMA), args.out or config.paths.segments)


@command(
    help="Rank the admissions most similar to a query admission.",
    arguments=(argument("--query", required=True, help="Query admission key."),),
)
def rank(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    cohort = _load_cohort(config)
    params = config.ranker.params()
    if config.ranker.choice is RankerChoice.EHR:
        ranked = rank_top_k(_index(config, cohort), cohort, args.query, params)
        frame = rankings_frame(args.query, ranked)
    else:
        record = cohort.get(args.query)
        if not record.note:
            raise MissingInputError(f"Admission {args.query} has no note to rank by.")
        exclude = {args.query}
        if params.exclude_same_subject:
            exclude.update(cohort.subject_admissions.get(record.subject_key, []))
        ranker = TextRanker(cohort, _embedding_provider(config, config.ranker.choice))
        frame = text_rankings_frame(args.query, ranker.rank(record.note, params.k, exclude))
    _write_frame(frame, args.out or config.paths.rankings)


@command(
    name="retrieve",
    help="Retrieve passages for dataset questions from the reports the ranker selects.",
    arguments=(argument("--question-id", help="Only this question."),),
)
def retrieve_passages(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    items = read_dataset(_require(config.paths.dataset, "genqa"))
    if args.question_id is not None:
        items = [item for item in items if item.question_id == args.question_id]
        if not items:
            raise MissingInputError(f"Question {args.question_id} is not in the dataset.")
    cohort = _load_cohort(config)
    choice = config.ranker.choice
    if choice is RankerChoice.EHR:
        mode, embedding = ContextMode.EXPRAG_EHR, None
    else:
        mode, embedding = ContextMode.TEXT_RANKER, _embedding_provider(config, choice)
    builder = ContextBuilder(cohort, config.harness_settings(), _index(config, cohort), embedding)
    params = config.retriever
    frames = []
    for item in items:
        reports = builder.selected_reports(item, mode)
        hits = retrieve(reports, item.retrieval_query(), params.method, params)
        frames.append(hits_frame(item.question_id, hits))
    frame = pl.concat(frames) if frames else hits_frame("", [])
    _write_frame(frame, args.out or config.paths.hits)


@command(help="Generate the DischargeQA dataset and its manifest.")
def genqa(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    cohort = _load_cohort(config)
    selector, permuter = None, None
    if config.llm_assist:
        provider = provider_from_spec(config.provider, _api_key())
        library = _prompts(config)
        selector = LlmDistractorSelector(provider, config.provider, library)
        permuter = LlmPermuter(provider, config.provider, library)
    items, manifest = build_dataset(cohort, config.generation, _headers(config), permuter, selector)
    out = Path(args.out or config.paths.dataset)
    write_dataset(items, out)
    manifest_path = (
        out.with_name(f"{out.stem}_manifest.json") if args.out else config.paths.manifest
    )
    write_manifest(manifest, manifest_path)
    logger.info("Wrote %d items to %s", len(items), out)
    if not manifest.complete:
        requested = sum(task.requested for task in manifest.tasks.values())
        raise PartialRunError(
            f"Generated {manifest.total} of {requested} requested items", str(manifest_path)
        )


@command(help="Answer every question under every context mode with the configured provider.")
def ask(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    dataset = _require(config.paths.dataset, "genqa")
    items = read_dataset(dataset)
    cohort = _load_cohort(config)
    provider = provider_from_spec(config.provider, _api_key())
    embedding = (
        _embedding_provider(config, config.harness.text_ranker)
        if ContextMode.TEXT_RANKER in config.harness.modes
        else None
    )
    result = run_qa_harness(
        items,
        cohort,
        provider,
        config.harness_settings(),
        config.provider,
        embedding,
        _index(config, cohort),
        _prompts(config),
    )

    stamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
    run_dir = Path(args.out or config.paths.runs_dir / stamp)
    write_records(result.records, run_dir / "records.ndjson")
    write_transcript(result.transcript, run_dir / "transcript.ndjson")
    result.report.write(run_dir / "metrics.ndjson")
    manifest = RunManifest(
        provider=provider.name,
        dataset=str(dataset),
        created=datetime.now().isoformat(timespec="seconds"),
        questions=len(items),
        requests=len(result.transcript),
        failed=result.failed,
    )
    manifest_path = run_dir / "run_manifest.json"
    manifest_path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    console.print(result.report.table())
    logger.info("Run written to %s", run_dir)

    if result.failed and result.failed == len(result.transcript):
        raise ProviderExitError(f"All {result.failed} requests to {provider.name} failed.")
    if result.failed:
        raise PartialRunError(
            f"{result.failed} of {len(result.transcript)} requests failed", str(manifest_path)
        )


@command(
    name="eval",
    help="Score a run's parsed answers and write the metrics report.",
    arguments=(RUN_ARGUMENT,),
)
def evaluate(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    run_dir = _latest_run(config, args.run)
    manifest_path = run_dir / "run_manifest.json"
    model = (
        RunManifest.model_validate_json(manifest_path.read_text(encoding="utf-8")).provider
        if manifest_path.exists()
        else run_dir.name
    )
    report = MetricsReport.from_records(read_records(run_dir / "records.ndjson"), model)
    out = Path(args.out or config.paths.reports_dir / "metrics.ndjson")
    report.write(out)
    console.print(report.table())

    def log(tracker: MlflowLogger) -> None:
        if config.paths.dataset.exists():
            tracker.log_input(config.paths.dataset)
        tracker.log_report(
            report.frame(), ["task", "context_mode"], ["accuracy", "f1", "invalid_rate"]
        )
        tracker.log_local_directory(run_dir)

    _track(config, log)


def _annotator(config: RunConfig) -> PairAnnotator:
    name = config.correlation.annotator
    if name == "ehr-oracle":
        return EhrOracleAnnotator()
    if name.startswith("constant:"):
        try:
            return ConstantAnnotator(float(name.removeprefix("constant:")))
        except ValueError as e:
            raise ConfigInvalidError(f"Invalid constant annotator {name!r}.") from e
    if name == "llm":
        provider = provider_from_spec(config.provider, _api_key())
        return LlmAnnotator(provider, config.provider, _prompts(config))
    raise ConfigInvalidError(
        f"Unknown annotator {name!r}; expected ehr-oracle, constant:<v> or llm."
    )


@command(help="Correlate ranker similarities with annotator similarities.")
def correlate(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    cohort = _load_cohort(config)
    rankers: list[PairScorer] = [
        EhrPairScorer(cohort, config.ranker.weights),
        TextPairScorer(
            TextRanker(cohort, LexicalTfidfProvider()), RankerChoice.TEXT_LEXICAL.value
        ),
    ]
    if config.text_ranker.remote is not None:
        remote = _embedding_provider(config, RankerChoice.TEXT_REMOTE)
        rankers.append(TextPairScorer(TextRanker(cohort, remote), RankerChoice.TEXT_REMOTE.value))
    report = run_correlation_harness(cohort, rankers, _annotator(config), config.correlation)
    out = args.out or config.paths.reports_dir / "correlation.ndjson"
    report.write(out)
    console.print(report.table())
    _track(
        config,
        lambda tracker: tracker.log_report(
            report.frame(), ["ranker"], ["mean_pearson", "mean_spearman"]
        ),
    )


@command(
    help="Run the top-k and weighting-strategy sweeps of the ExpRAG context mode.",
    arguments=(
        argument("--kind", choices=["k", "weighting", "all"], default="all", help="Sweep to run."),
    ),
)
def sweep(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    items = read_dataset(_require(config.paths.dataset, "genqa"))
    cohort = _load_cohort(config)
    provider = provider_from_spec(config.provider, _api_key())
    settings, library = config.harness_settings(), _prompts(config)
    out_dir = Path(args.out or config.paths.reports_dir)
    reports: list[SweepReport] = []
    if args.kind in ("k", "all"):
        reports.append(
            run_topk_sweep(
                items, cohort, provider, config.sweep.ks, settings, config.provider, library
            )
        )
    if args.kind in ("weighting", "all"):
        reports.append(
            run_weighting_sweep(
                items, cohort, provider, config.sweep.strategies, settings, config.provider, library
            )
        )
    for report in reports:
        report.write(out_dir / f"sweep_{report.parameter}.ndjson")
        console.print(report.table())

    def log(tracker: MlflowLogger) -> None:
        for r in reports:
            tracker.log_report(r.frame(), ["parameter", "value", "task"], ["accuracy", "f1"])
        tracker.log_local_directory(out_dir)

    _track(config, log)


def improvement_table(report: MetricsReport) -> Table | None:
    """Relative accuracy improvement of ExpRAG over each baseline mode, per task."""
    table = Table(title="Relative improvement of exprag_ehr (%)")
    table.add_column("Baseline")
    tasks = [task for task in TaskKind if report.cell(task, ContextMode.EXPRAG_EHR)]
    for task in tasks:
        table.add_column(str(task), justify="right")
    table.add_column("Mean", justify="right")
    rows = 0
    for baseline in (ContextMode.DIRECT_ASK, ContextMode.TEXT_RANKER):
        values: list[str] = []
        cells: list[tuple[float, float]] = []
        for task in tasks:
            new, base = report.cell(task, ContextMode.EXPRAG_EHR), report.cell(task, baseline)
            if new is None or base is None or base.accuracy <= 0:
                values.append("-")
                continue
            cells.append((new.accuracy, base.accuracy))
            values.append(f"{relative_improvement(new.accuracy, base.accuracy):+.1f}")
        if cells:
            table.add_row(str(baseline), *values, f"{mean_relative_improvement(cells):+.1f}")
            rows += 1
    return table if rows else None


@command(help="Render the saved reports as tables.")
def report(config: RunConfig, args: Namespace) -> None:
    config = _configured(config, args)
    reports_dir = Path(args.out or config.paths.reports_dir)
    found = False
    metrics_path = reports_dir / "metrics.ndjson"
    if metrics_path.exists():
        metrics = MetricsReport.read(metrics_path)
        console.print(metrics.table())
        if (table := improvement_table(metrics)) is not None:
            console.print(table)
        found = True
    for path in sorted(reports_dir.glob("sweep_*.ndjson")):
        console.print(SweepReport.read(path).table())
        found = True
    correlation_path = reports_dir / "correlation.ndjson"
    if correlation_path.exists():
        console.print(CorrelationReport.read(correlation_path).table())
        found = True
    if not found:
        raise MissingInputError(
            f"No report under {reports_dir}; run `eval`, `sweep` or `correlate`."
        )


def classify(error: BaseException) -> CommandError | None:
    """Map a domain exception to the command error carrying its exit code."""
    match error:
        case FileNotFoundError():
            return MissingInputError(f"Input not found: {error.filename or error}")
        case UnknownAdmissionError():
            return MissingInputError(str(error))
        case (
            AuthRejectedError() | TransportError() | ContextTooLongError() | ProviderFailureError()
        ):
            return ProviderExitError(f"{type(error).__name__}: {error}")
        case InvalidParameterError() | UnknownMethodError():
            return ConfigInvalidError(str(error))
        case ExpRagError():
            return CommandError(f"{type(error).__name__}: {error}")
        case ValueError():
            return ConfigInvalidError(str(error))
    return None


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser("exprag", COMMON_ARGUMENTS)
    args = parser.parse_args(argv)
    global_config = ConfigProvider().global_config
    setup_logger(global_config.log_level, global_config.log_dir, args.command)
    return dispatch(args, classify)
