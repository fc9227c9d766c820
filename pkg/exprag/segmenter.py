"""Discharge-note segmentation into canonical sections, background assembly and gold extraction."""

import logging
import re
from enum import StrEnum
from functools import cached_property
from pathlib import Path
from typing import ClassVar

from pydantic import BaseModel, ConfigDict, Field, model_validator

from exprag.exceptions import EmptyBackgroundError, MissingGoldSectionError
from utils.configs import YamlBaseModel

logger = logging.getLogger(__name__)


class SectionKind(StrEnum):
    PATIENT_DEMOGRAPHY = "patient_demography"
    PRESENTING_CONDITION = "presenting_condition"
    CLINICAL_ASSESSMENT = "clinical_assessment"
    TREATMENT_PLAN = "treatment_plan"
    IN_HOSPITAL_PROGRESS = "in_hospital_progress"
    DISCHARGE_SUMMARY = "discharge_summary"
    POST_DISCHARGE_INSTRUCTIONS = "post_discharge_instructions"

    @property
    def phase(self) -> "Phase":
        return _PHASE_OF[self]

    @property
    def order(self) -> int:
        return _SECTION_ORDER[self]


class Phase(StrEnum):
    CLINICAL_PROFILE = "clinical_profile"
    IN_HOSPITAL = "in_hospital"
    DISCHARGE_PLAN = "discharge_plan"


_SECTION_ORDER = {kind: i for i, kind in enumerate(SectionKind)}
_PHASE_OF = {
    SectionKind.PATIENT_DEMOGRAPHY: Phase.CLINICAL_PROFILE,
    SectionKind.PRESENTING_CONDITION: Phase.CLINICAL_PROFILE,
    SectionKind.CLINICAL_ASSESSMENT: Phase.CLINICAL_PROFILE,
    SectionKind.TREATMENT_PLAN: Phase.IN_HOSPITAL,
    SectionKind.IN_HOSPITAL_PROGRESS: Phase.IN_HOSPITAL,
    SectionKind.DISCHARGE_SUMMARY: Phase.DISCHARGE_PLAN,
    SectionKind.POST_DISCHARGE_INSTRUCTIONS: Phase.DISCHARGE_PLAN,
}


class TaskKind(StrEnum):
    DIAGNOSIS = "diagnosis"
    MEDICATION = "medication"
    INSTRUCTION = "instruction"

    @property
    def background_phases(self) -> tuple[Phase, ...]:
        if self is TaskKind.DIAGNOSIS:
            return (Phase.CLINICAL_PROFILE,)
        return (Phase.CLINICAL_PROFILE, Phase.IN_HOSPITAL)


def _default_sections() -> dict[SectionKind, list[str]]:
    return {
        SectionKind.PATIENT_DEMOGRAPHY: [
            "Patient Demography",
            "Demographics",
            "Patient Information",
        ],
        SectionKind.PRESENTING_CONDITION: ["Chief Complaint", "History of Present Illness"],
        SectionKind.CLINICAL_ASSESSMENT: [
            "Physical Exam",
            "Past Medical History",
            "Pertinent Results",
            "Clinical Assessment",
        ],
        SectionKind.TREATMENT_PLAN: ["Major Surgical or Invasive Procedure", "Treatment Plan"],
        SectionKind.IN_HOSPITAL_PROGRESS: ["Brief Hospital Course", "Hospital Course"],
        SectionKind.DISCHARGE_SUMMARY: [
            "Discharge Diagnosis",
            "Discharge Diagnoses",
            "Discharge Medications",
            "Discharge Condition",
            "Discharge Disposition",
        ],
        SectionKind.POST_DISCHARGE_INSTRUCTIONS: [
            "Discharge Instructions",
            "Followup Instructions",
        ],
    }


def _default_gold_headers() -> dict[TaskKind, list[str]]:
    return {
        TaskKind.DIAGNOSIS: ["Discharge Diagnosis", "Discharge Diagnoses"],
        TaskKind.MEDICATION: ["Discharge Medications"],
        TaskKind.INSTRUCTION: ["Discharge Instructions"],
    }


class HeaderTable(YamlBaseModel):
    """Synonym table mapping header strings to section kinds, plus the gold-bearing headers.

    A header is recognized at the start of a line, case-insensitively, when followed by a colon.
    """

    DEFAULT_CONFIG_PATH: ClassVar[Path] = Path("configs/headers.yaml")

    sections: dict[SectionKind, list[str]] = Field(default_factory=_default_sections)
    gold_headers: dict[TaskKind, list[str]] = Field(default_factory=_default_gold_headers)
    item_pattern: str = Field(
        default=r"^\s*(?:\d+[.)]|[-*•])\s+",
        description="Line prefix marking a list item (digits+period, hyphen, asterisk, bullet).",
    )
    sentence_pattern: str = Field(
        default=r"(?<=[.!?])\s+|\n+",
        description="Boundary between sentences; bullets on new lines split as well.",
    )

    @model_validator(mode="after")
    def _gold_headers_are_sections(self) -> "HeaderTable":
        known = {header.casefold() for headers in self.sections.values() for header in headers}
        for task, headers in self.gold_headers.items():
            missing = [h for h in headers if h.casefold() not in known]
            if missing:
                raise ValueError(f"Gold headers for {task} are not section headers: {missing}")
        return self

    @cached_property
    def header_regex(self) -> re.Pattern[str]:
        alternatives = sorted(
            {header for headers in self.sections.values() for header in headers},
            key=lambda h: (-len(h), h),
        )
        pattern = "|".join(r"[ \t]+".join(map(re.escape, h.split())) for h in alternatives)
        return re.compile(rf"^[ \t]*(?P<header>{pattern})[ \t]*:", re.IGNORECASE | re.MULTILINE)

    @cached_property
    def kind_of_header(self) -> dict[str, SectionKind]:
        return {
            _fold(header): kind for kind, headers in self.sections.items() for header in headers
        }

    def is_gold_header(self, header: str, task: TaskKind) -> bool:
        return _fold(header) in {_fold(h) for h in self.gold_headers.get(task, [])}


def _fold(header: str) -> str:
    return " ".join(header.split()).casefold()


class NoteSection(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: SectionKind
    header: str
    start: int
    body_start: int
    end: int
    text: str

    @property
    def body(self) -> str:
        return self.text[self.body_start - self.start :]


class SegmentedNote(BaseModel):
    """A note split into recognized sections (document order) and unmatched leading text."""

    model_config = ConfigDict(frozen=True)

    admission_key: str | None = None
    residual: str = ""
    spans: list[NoteSection] = Field(default_factory=list)

    @property
    def sections(self) -> dict[SectionKind, str]:
        """Section text per kind; repeated kinds are joined in document order."""
        joined: dict[SectionKind, str] = {}
        for span in self.spans:
            joined[span.kind] = joined.get(span.kind, "") + span.text
        return joined

    def reconstruct(self) -> str:
        return self.residual + "".join(span.text for span in self.spans)

    def spans_in(self, phases: tuple[Phase, ...]) -> list[NoteSection]:
        return [span for span in self.spans if span.kind.phase in phases]


def segment_note(
    text: str, headers: HeaderTable | None = None, admission_key: str | None = None
) -> SegmentedNote:
    """Split a note at recognized headers; each section runs until the next recognized header."""
    headers = headers or HeaderTable()
    matches = list(headers.header_regex.finditer(text))
    if not matches:
        return SegmentedNote(admission_key=admission_key, residual=text)

    spans: list[NoteSection] = []
    for match, following in zip(matches, [*matches[1:], None], strict=True):
        end = following.start() if following is not None else len(text)
        header = match.group("header")
        spans.append(
            NoteSection(
                kind=headers.kind_of_header[_fold(header)],
                header=header,
                start=match.start(),
                body_start=match.end(),
                end=end,
                text=text[match.start() : end],
            )
        )
    residual = text[: matches[0].start()]
    return SegmentedNote(admission_key=admission_key, residual=residual, spans=spans)


def assemble_background(seg: SegmentedNote, task: TaskKind) -> str:
    """Join the sections visible at decision time for a task.

    Sections are ordered by canonical section order, then by position in the note, so the
    diagnosis background is always a prefix of the medication background. Discharge-plan
    sections never appear.

    Raises:
        EmptyBackgroundError: If the note has no section of the required phases.
    """
    spans = sorted(
        (span for span in seg.spans_in(task.background_phases) if span.text.strip()),
        key=lambda span: (span.kind.order, span.start),
    )
    if not spans:
        raise EmptyBackgroundError(
            f"Note {seg.admission_key!r} has no {'/'.join(task.background_phases)} section."
        )
    return "\n\n".join(span.text.strip() for span in spans)


class GoldItem(BaseModel):
    model_config = ConfigDict(frozen=True)

    text: str = Field(description="Normalized text used for matching.")
    display: str = Field(description="Item as written in the note, list marker removed.")
    detail: str | None = Field(default=None, description="Dose text for medication items.")


_PUNCTUATION = re.compile(r"[^\w\s]")
_LEADING_MARKER = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])(?:\s+|$)")


def normalize_text(text: str) -> str:
    """Lowercase, drop list markers and punctuation, collapse whitespace."""
    text = _LEADING_MARKER.sub("", text)
    text = _PUNCTUATION.sub(" ", text.lower())
    return " ".join(text.split())


def split_sentences(text: str, headers: HeaderTable | None = None) -> list[str]:
    headers = headers or HeaderTable()
    return [part.strip() for part in re.split(headers.sentence_pattern, text) if part.strip()]


def split_items(text: str, headers: HeaderTable | None = None) -> list[str]:
    """List items of a section body; falls back to sentences when no line is a list item."""
    headers = headers or HeaderTable()
    marker = re.compile(headers.item_pattern)
    lines = [line for line in text.splitlines() if line.strip()]
    items = [marker.sub("", line, count=1).strip() for line in lines if marker.match(line)]
    if items:
        return items
    return split_sentences(text, headers)


def split_medication(item: str) -> tuple[str, str | None]:
    """Split a medication line into drug name and dose text at the first token with a digit."""
    tokens = item.split()
    for i, token in enumerate(tokens):
        if any(ch.isdigit() for ch in token) and i > 0:
            return " ".join(tokens[:i]), " ".join(tokens[i:])
    return item.strip(), None


def _gold_body(seg: SegmentedNote, task: TaskKind, headers: HeaderTable) -> str:
    bodies = [
        span.body.strip() for span in seg.spans if headers.is_gold_header(span.header, task)
    ]
    body = "\n".join(b for b in bodies if b)
    if not body:
        raise MissingGoldSectionError(f"Note {seg.admission_key!r} has no {task} gold section.")
    return body


def extract_gold(
    seg: SegmentedNote, task: TaskKind, headers: HeaderTable | None = None
) -> list[GoldItem]:
    """Extract the gold answers of a task from the discharge-plan sections.

    Raises:
        MissingGoldSectionError: If the gold section is absent or holds no item.
    """
    headers = headers or HeaderTable()
    body = _gold_body(seg, task, headers)
    if task is TaskKind.INSTRUCTION:
        return [GoldItem(text=body, display=body)]

    gold: list[GoldItem] = []
    seen: set[str] = set()
    for item in split_items(body, headers):
        detail = None
        if task is TaskKind.MEDICATION:
            item, detail = split_medication(item)
        display = item.strip().rstrip(".,;")
        normalized = normalize_text(display)
        if normalized and normalized not in seen:
            seen.add(normalized)
            gold.append(GoldItem(text=normalized, display=display, detail=detail))
    if not gold:
        raise MissingGoldSectionError(f"Note {seg.admission_key!r} lists no {task} item.")
    return gold


def instruction_key_points(seg: SegmentedNote, headers: HeaderTable | None = None) -> list[str]:
    """Bullets of the instruction section, each summarized by its first sentence."""
    headers = headers or HeaderTable()
    body = _gold_body(seg, TaskKind.INSTRUCTION, headers)
    points = []
    for item in split_items(body, headers):
        sentences = split_sentences(item, headers)
        if sentences:
            points.append(sentences[0])
    return points
