"""Discharge QA generation: multi-select diagnosis/medication items and single-select instructions.

Gold answers come from the discharge-plan sections of the note; diagnosis and medication
distractors come from the admission's own EHR code descriptions, instruction distractors from
permuted key points. Backgrounds only ever hold clinical-profile and in-hospital sections.
"""

import logging
import random
import re
import string
from abc import ABC, abstractmethod
from collections import Counter
from collections.abc import Sequence
from enum import StrEnum
from pathlib import Path
from typing import Self, override

import polars as pl
from pydantic import BaseModel, ConfigDict, Field, model_validator

from exprag.cohort import AdmissionRecord, Cohort, CodeKind
from exprag.exceptions import (
    EmptyBackgroundError,
    ExpRagError,
    InsufficientDistractorsError,
    MissingGoldSectionError,
    TooFewKeyPointsError,
)
from exprag.segmenter import (
    HeaderTable,
    SegmentedNote,
    TaskKind,
    assemble_background,
    extract_gold,
    instruction_key_points,
    normalize_text,
    segment_note,
    split_medication,
)

logger = logging.getLogger(__name__)

LETTERS = string.ascii_uppercase

TASK_CODE_KIND = {TaskKind.DIAGNOSIS: CodeKind.DIAGNOSIS, TaskKind.MEDICATION: CodeKind.MEDICATION}


class OptionSource(StrEnum):
    GOLD = "gold"
    EHR_DISTRACTOR = "ehr_distractor"
    PERMUTED_DISTRACTOR = "permuted_distractor"


class AnswerMode(StrEnum):
    MULTI_SELECT = "multi_select"
    SINGLE_SELECT = "single_select"

    @classmethod
    def for_task(cls, task: TaskKind) -> "AnswerMode":
        return cls.SINGLE_SELECT if task is TaskKind.INSTRUCTION else cls.MULTI_SELECT


class QAOption(BaseModel):
    model_config = ConfigDict(frozen=True)

    letter: str = Field(pattern=r"^[A-Z]$")
    text: str = Field(min_length=1)
    source: OptionSource


class QAItem(BaseModel):
    """One generated question with lettered options and the set of gold letters."""

    model_config = ConfigDict(frozen=True)

    question_id: str
    admission_key: str
    task: TaskKind
    mode: AnswerMode
    question: str
    background: str
    options: list[QAOption]
    gold_letters: list[str]

    @model_validator(mode="after")
    def _consistent(self) -> Self:
        letters = [option.letter for option in self.options]
        if letters != list(LETTERS[: len(self.options)]):
            raise ValueError(f"Option letters must run A, B, C, ...; got {letters}.")
        if not self.gold_letters:
            raise ValueError("An item needs at least one gold letter.")
        if self.gold_letters != sorted(set(self.gold_letters)):
            raise ValueError("Gold letters must be sorted and unique.")
        sources = {option.letter: option.source for option in self.options}
        if any(sources.get(letter) is not OptionSource.GOLD for letter in self.gold_letters):
            raise ValueError("Every gold letter must point to a gold option.")
        if self.mode is not AnswerMode.for_task(self.task):
            raise ValueError(f"{self.task} items are {AnswerMode.for_task(self.task)}.")
        if self.mode is AnswerMode.SINGLE_SELECT and len(self.gold_letters) != 1:
            raise ValueError("Single-select items have exactly one gold letter.")
        normalized = Counter(normalize_text(option.text) for option in self.options)
        if normalized.most_common(1)[0][1] > 1:
            raise ValueError("Two options share the same normalized text.")
        return self

    @property
    def n_options(self) -> int:
        return len(self.options)

    @property
    def gold_set(self) -> frozenset[str]:
        return frozenset(self.gold_letters)

    def render_options(self) -> str:
        return "\n".join(f"{option.letter}) {option.text}" for option in self.options)

    def retrieval_query(self) -> str:
        """Query used to retrieve passages: the question and its options."""
        return f"{self.question}\n{self.render_options()}"

    def ranking_query(self) -> str:
        """Query used by the text ranker: question, options and background."""
        return f"{self.retrieval_query()}\n{self.background}"


def _default_counts() -> dict[TaskKind, int]:
    return {TaskKind.DIAGNOSIS: 436, TaskKind.MEDICATION: 444, TaskKind.INSTRUCTION: 400}


def _default_questions() -> dict[TaskKind, str]:
    return {
        TaskKind.DIAGNOSIS: (
            "Based on the patient's clinical profile, which of the following diagnoses should "
            "be recorded at discharge? Select all that apply."
        ),
        TaskKind.MEDICATION: (
            "Based on the patient's clinical profile and hospital course, which of the "
            "following medications should be prescribed at discharge? Select all that apply."
        ),
        TaskKind.INSTRUCTION: (
            "Based on the patient's clinical profile and hospital course, which of the "
            "following discharge instructions is the most appropriate?"
        ),
    }


class GenParams(BaseModel):
    seed: int = 0
    n_options_multi: int = Field(default=8, ge=2, le=len(LETTERS))
    n_options_single: int = Field(default=4, ge=2, le=len(LETTERS))
    min_distractors: int = Field(default=1, ge=1)
    min_bullets: int = Field(default=4, ge=1)
    counts: dict[TaskKind, int] = Field(default_factory=_default_counts)
    questions: dict[TaskKind, str] = Field(default_factory=_default_questions)

    @model_validator(mode="after")
    def _room_for_distractors(self) -> Self:
        if self.n_options_multi < self.min_distractors + 1:
            raise ValueError("n_options_multi must leave room for a gold option and distractors.")
        if any(count < 0 for count in self.counts.values()):
            raise ValueError("Item counts cannot be negative.")
        return self

    def n_options(self, task: TaskKind) -> int:
        if task is TaskKind.INSTRUCTION:
            return self.n_options_single
        return self.n_options_multi

    def question(self, task: TaskKind) -> str:
        return self.questions.get(task) or _default_questions()[task]

    def rng(self, task: TaskKind, admission_key: str) -> random.Random:
        """Per-item generator, independent of which other items were generated."""
        return random.Random(f"{self.seed}:{task}:{admission_key}")


class DistractorSelector(ABC):
    """Picks ``count`` distractors among an admission's non-gold EHR descriptions."""

    @abstractmethod
    def select(
        self,
        background: str,
        gold: Sequence[str],
        candidates: Sequence[str],
        count: int,
        rng: random.Random,
    ) -> list[str]:
        pass


class SeededDistractorSelector(DistractorSelector):
    @override
    def select(
        self,
        background: str,
        gold: Sequence[str],
        candidates: Sequence[str],
        count: int,
        rng: random.Random,
    ) -> list[str]:
        return rng.sample(list(candidates), count)


class InstructionPermuter(ABC):
    """Produces plausible but incorrect instruction summaries from the gold key points."""

    @abstractmethod
    def permute(
        self, key_points: Sequence[str], count: int, rng: random.Random, substitutes: Sequence[str]
    ) -> list[str]:
        """Return up to ``count`` perturbed summaries.

        Args:
            key_points: First sentence of every instruction bullet, in note order.
            count: Number of distractors wanted.
            rng: Seeded generator of the item.
            substitutes: Medication names from the admission's EHR.
        """


def summarize_key_points(key_points: Sequence[str]) -> str:
    return " ".join(point.strip() for point in key_points)


_NUMBER = re.compile(r"\d+(?:\.\d+)?")
_NEGATION = re.compile(r"^(?:do not|don't|never)\s+", re.IGNORECASE)


class RuleBasedPermuter(InstructionPermuter):
    """Seeded perturbations of the key points.

    Each distractor swaps an attribute between two key points, negates one directive or
    substitutes a medication from the admission's EHR; later attempts stack two of them.
    """

    def __init__(self, max_attempts: int = 30):
        self.max_attempts = max_attempts

    @staticmethod
    def swap_attributes(points: list[str], rng: random.Random) -> list[str]:
        if len(points) < 2:
            return points
        numbered = [(i, m) for i, point in enumerate(points) if (m := _NUMBER.search(point))]
        if len(numbered) >= 2:
            (i, a), (j, b) = rng.sample(numbered, 2)
            points[i] = points[i][: a.start()] + b.group() + points[i][a.end() :]
            points[j] = points[j][: b.start()] + a.group() + points[j][b.end() :]
            return points
        i, j = rng.sample(range(len(points)), 2)
        head_i, _, last_i = points[i].rstrip(".").rpartition(" ")
        head_j, _, last_j = points[j].rstrip(".").rpartition(" ")
        if head_i and head_j:
            points[i] = f"{head_i} {last_j}."
            points[j] = f"{head_j} {last_i}."
        return points

    @staticmethod
    def negate(points: list[str], rng: random.Random) -> list[str]:
        i = rng.randrange(len(points))
        point = points[i]
        if _NEGATION.match(point):
            stripped = _NEGATION.sub("", point, count=1)
            points[i] = stripped[:1].upper() + stripped[1:]
        else:
            points[i] = f"Do not {point[:1].lower()}{point[1:]}"
        return points

    @staticmethod
    def substitute(points: list[str], rng: random.Random, substitutes: Sequence[str]) -> list[str]:
        if not substitutes:
            return points
        i = rng.randrange(len(points))
        point = points[i]
        present = [s for s in substitutes if s and s.lower() in point.lower()]
        replacement = rng.choice([s for s in substitutes if s not in present] or list(substitutes))
        if present:
            target = present[0]
            at = point.lower().index(target.lower())
            points[i] = point[:at] + replacement + point[at + len(target) :]
        else:
            head, _, _ = point.rstrip(".").rpartition(" ")
            points[i] = f"{head or point.rstrip('.')} {replacement}."
        return points

    @override
    def permute(
        self, key_points: Sequence[str], count: int, rng: random.Random, substitutes: Sequence[str]
    ) -> list[str]:
        operations = [
            lambda points: self.swap_attributes(points, rng),
            lambda points: self.negate(points, rng),
            lambda points: self.substitute(points, rng, substitutes),
        ]
        seen = {normalize_text(summarize_key_points(key_points))}
        permuted: list[str] = []
        for attempt in range(self.max_attempts):
            if len(permuted) == count:
                break
            points = list(key_points)
            applied = [operations[attempt % 3]]
            if attempt >= 3:
                applied.append(rng.choice(operations))
            for op in applied:
                points = op(points)
            text = summarize_key_points(points)
            if normalize_text(text) not in seen:
                seen.add(normalize_text(text))
                permuted.append(text)
        return permuted


def _shuffle_options(
    gold: Sequence[str], distractors: Sequence[tuple[str, OptionSource]], rng: random.Random
) -> tuple[list[QAOption], list[str]]:
    pool = [(text, OptionSource.GOLD) for text in gold] + list(distractors)
    rng.shuffle(pool)
    options = [
        QAOption(letter=LETTERS[i], text=text, source=source)
        for i, (text, source) in enumerate(pool)
    ]
    gold_letters = [option.letter for option in options if option.source is OptionSource.GOLD]
    return options, gold_letters


def _candidate_text(description: str, task: TaskKind) -> str:
    # medication options compare and display on the drug name, as the gold does
    if task is TaskKind.MEDICATION:
        description, _ = split_medication(description)
    return description.strip().rstrip(".,;")


def gen_multiselect_item(
    adm: AdmissionRecord,
    seg: SegmentedNote,
    task: TaskKind,
    cohort: Cohort,
    params: GenParams,
    rng: random.Random,
    headers: HeaderTable | None = None,
    selector: DistractorSelector | None = None,
) -> QAItem:
    """Multi-select diagnosis or medication item with EHR-sourced distractors.

    Raises:
        MissingGoldSectionError: If the note lists no gold item for the task.
        EmptyBackgroundError: If the note has no background section.
        InsufficientDistractorsError: If too few non-gold EHR descriptions remain.
    """
    if task not in TASK_CODE_KIND:
        raise ValueError(f"{task} items are not multi-select.")
    selector = selector or SeededDistractorSelector()
    n_options = params.n_options(task)
    gold_items = extract_gold(seg, task, headers)
    background = assemble_background(seg, task)

    # gold answers dropped by the cap are still correct and never become distractors
    gold_norm = {item.text for item in gold_items}
    max_gold = n_options - params.min_distractors
    if len(gold_items) > max_gold:
        kept = sorted(rng.sample(range(len(gold_items)), max_gold))
        gold_items = [gold_items[i] for i in kept]

    candidates: dict[str, str] = {}
    for description in cohort.code_descriptions(adm.admission_key, TASK_CODE_KIND[task]):
        option = _candidate_text(description, task)
        normalized = normalize_text(option)
        if normalized and normalized not in gold_norm:
            candidates.setdefault(normalized, option)
    needed = n_options - len(gold_items)
    if len(candidates) < needed:
        raise InsufficientDistractorsError(needed, len(candidates))

    gold_display = [item.display for item in gold_items]
    chosen = selector.select(background, gold_display, list(candidates.values()), needed, rng)
    options, gold_letters = _shuffle_options(
        gold_display, [(text, OptionSource.EHR_DISTRACTOR) for text in chosen], rng
    )
    return QAItem(
        question_id=f"{task}-{adm.admission_key}",
        admission_key=adm.admission_key,
        task=task,
        mode=AnswerMode.MULTI_SELECT,
        question=params.question(task),
        background=background,
        options=options,
        gold_letters=gold_letters,
    )


def gen_instruction_item(
    adm: AdmissionRecord,
    seg: SegmentedNote,
    params: GenParams,
    rng: random.Random,
    permuter: InstructionPermuter | None = None,
    cohort: Cohort | None = None,
    headers: HeaderTable | None = None,
) -> QAItem:
    """Single-select instruction item: the key-point summary against permuted summaries.

    Raises:
        MissingGoldSectionError: If the note has no instruction section.
        TooFewKeyPointsError: If the instruction has fewer than ``min_bullets`` key points.
        EmptyBackgroundError: If the note has no background section.
        InsufficientDistractorsError: If the permuter cannot produce enough distinct options.
    """
    permuter = permuter or RuleBasedPermuter()
    key_points = instruction_key_points(seg, headers)
    if len(key_points) < params.min_bullets:
        raise TooFewKeyPointsError(len(key_points), params.min_bullets)
    background = assemble_background(seg, TaskKind.INSTRUCTION)

    gold = summarize_key_points(key_points)
    substitutes = (
        cohort.code_descriptions(adm.admission_key, CodeKind.MEDICATION) if cohort else []
    )
    needed = params.n_options(TaskKind.INSTRUCTION) - 1
    seen = {normalize_text(gold)}
    distractors = []
    for text in permuter.permute(key_points, needed, rng, substitutes):
        if normalize_text(text) not in seen and len(distractors) < needed:
            seen.add(normalize_text(text))
            distractors.append(text)
    if len(distractors) < needed:
        raise InsufficientDistractorsError(needed, len(distractors))

    options, gold_letters = _shuffle_options(
        [gold], [(text, OptionSource.PERMUTED_DISTRACTOR) for text in distractors], rng
    )
    return QAItem(
        question_id=f"{TaskKind.INSTRUCTION}-{adm.admission_key}",
        admission_key=adm.admission_key,
        task=TaskKind.INSTRUCTION,
        mode=AnswerMode.SINGLE_SELECT,
        question=params.question(TaskKind.INSTRUCTION),
        background=background,
        options=options,
        gold_letters=gold_letters,
    )


class TaskManifest(BaseModel):
    requested: int = 0
    generated: int = 0
    skipped: dict[str, int] = Field(default_factory=dict)

    @property
    def shortfall(self) -> int:
        return max(self.requested - self.generated, 0)


class DatasetManifest(BaseModel):
    seed: int
    tasks: dict[TaskKind, TaskManifest] = Field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(task.generated for task in self.tasks.values())

    @property
    def complete(self) -> bool:
        return all(task.shortfall == 0 for task in self.tasks.values())


_SKIPPABLE = (
    MissingGoldSectionError,
    EmptyBackgroundError,
    InsufficientDistractorsError,
    TooFewKeyPointsError,
)


def build_dataset(
    cohort: Cohort,
    params: GenParams,
    headers: HeaderTable | None = None,
    permuter: InstructionPermuter | None = None,
    selector: DistractorSelector | None = None,
) -> tuple[list[QAItem], DatasetManifest]:
    """Generate up to ``params.counts[task]`` items per task over admissions in key order.

    Admissions that cannot yield an item are skipped, and the reason is counted in the manifest.
    """
    headers = headers or HeaderTable()
    items: list[QAItem] = []
    manifest = DatasetManifest(seed=params.seed)
    segmented: dict[str, SegmentedNote] = {}

    for task in TaskKind:
        report = TaskManifest(requested=params.counts.get(task, 0))
        manifest.tasks[task] = report
        for key in cohort.keys:
            if report.generated >= report.requested:
                break
            adm = cohort.admissions[key]
            if not adm.note:
                report.skipped["no_note"] = report.skipped.get("no_note", 0) + 1
                continue
            if key not in segmented:
                segmented[key] = segment_note(adm.note, headers, key)
            rng = params.rng(task, key)
            try:
                if task is TaskKind.INSTRUCTION:
                    item = gen_instruction_item(
                        adm, segmented[key], params, rng, permuter, cohort, headers
                    )
                else:
                    item = gen_multiselect_item(
                        adm, segmented[key], task, cohort, params, rng, headers, selector
                    )
            except _SKIPPABLE as e:
                reason = _skip_reason(e)
                report.skipped[reason] = report.skipped.get(reason, 0) + 1
                logger.debug("Skipped %s item for %s: %s", task, key, e)
                continue
            items.append(item)
            report.generated += 1
        if report.shortfall:
            logger.warning(
                "Generated %d of %d %s items; skipped: %s",
                report.generated,
                report.requested,
                task,
                report.skipped,
            )
    logger.info("Generated %d items.", len(items))
    return items, manifest


def _skip_reason(error: ExpRagError) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(error).__name__.removesuffix("Error")).lower()


DATASET_SCHEMA = {
    "question_id": pl.String,
    "admission_key": pl.String,
    "task": pl.String,
    "mode": pl.String,
    "question": pl.String,
    "background": pl.String,
    "options": pl.List(pl.Struct({"letter": pl.String, "text": pl.String, "source": pl.String})),
    "gold_letters": pl.List(pl.String),
}


def write_dataset(items: Sequence[QAItem], path: Path) -> None:
    """Write items as line-delimited records."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pl.DataFrame([item.model_dump(mode="json") for item in items], schema=DATASET_SCHEMA)
    frame.write_ndjson(path)


def read_dataset(path: Path) -> list[QAItem]:
    path = Path(path)
    if path.stat().st_size == 0:
        return []
    frame = pl.read_ndjson(path, schema=DATASET_SCHEMA)
    return [QAItem.model_validate(row) for row in frame.to_dicts()]


def write_manifest(manifest: DatasetManifest, path: Path) -> None:
    Path(path).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
