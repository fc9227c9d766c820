"""Cohort data model, ingestion of code tables and discharge notes, and patient filtering."""

import csv
import gzip
import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from enum import StrEnum
from functools import cached_property
from pathlib import Path
from typing import Literal, NamedTuple, TextIO

import polars as pl
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_serializer

from exprag.exceptions import (
    ConflictingSubjectError,
    MalformedLineError,
    MalformedRowError,
    MissingColumnError,
    UnknownAdmissionError,
)

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = "exprag-cohort"
ARCHIVE_VERSION = 1

# Inclusive bounds on every code-set size of a retained admission.
DEFAULT_MIN_ENTRIES = 3
DEFAULT_MAX_ENTRIES = 40


class CodeKind(StrEnum):
    DIAGNOSIS = "diagnosis"
    MEDICATION = "medication"
    PROCEDURE = "procedure"


def normalize_code(raw: str, kind: CodeKind) -> str:
    """Trim and uppercase a code; ICD codes additionally lose their embedded dots."""
    code = raw.strip().upper()
    if kind is not CodeKind.MEDICATION:
        code = code.replace(".", "")
    return code


class CodeEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_key: str
    admission_key: str
    kind: CodeKind
    code: str = Field(min_length=1)
    description: str | None = None


class AdmissionRecord(BaseModel):
    """One hospital encounter with its three code sets and its discharge note."""

    model_config = ConfigDict(frozen=True)

    subject_key: str
    admission_key: str
    diag_codes: frozenset[str] = frozenset()
    med_codes: frozenset[str] = frozenset()
    proc_codes: frozenset[str] = frozenset()
    note: str | None = None

    def codes(self, kind: CodeKind) -> frozenset[str]:
        match kind:
            case CodeKind.DIAGNOSIS:
                return self.diag_codes
            case CodeKind.MEDICATION:
                return self.med_codes
            case CodeKind.PROCEDURE:
                return self.proc_codes

    @property
    def has_note(self) -> bool:
        return bool(self.note)

    @field_serializer("diag_codes", "med_codes", "proc_codes")
    def _sorted_codes(self, codes: frozenset[str]) -> list[str]:
        return sorted(codes)


class Cohort(BaseModel):
    """Immutable map of admissions plus the code descriptions seen at ingestion."""

    model_config = ConfigDict(frozen=True)

    admissions: dict[str, AdmissionRecord] = Field(default_factory=dict)
    descriptions: dict[CodeKind, dict[str, str]] = Field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.admissions)

    def __len__(self) -> int:
        return len(self.admissions)

    def __contains__(self, admission_key: object) -> bool:
        return admission_key in self.admissions

    def get(self, admission_key: str) -> AdmissionRecord:
        try:
            return self.admissions[admission_key]
        except KeyError:
            raise UnknownAdmissionError(admission_key) from None

    @cached_property
    def keys(self) -> list[str]:
        return sorted(self.admissions)

    @cached_property
    def subject_admissions(self) -> dict[str, list[str]]:
        grouped: dict[str, list[str]] = defaultdict(list)
        for key in self.keys:
            grouped[self.admissions[key].subject_key].append(key)
        return dict(grouped)

    def describe(self, kind: CodeKind, code: str) -> str | None:
        return self.descriptions.get(kind, {}).get(code)

    def code_descriptions(self, admission_key: str, kind: CodeKind) -> list[str]:
        """Descriptions of the admission's codes of one kind, in code order."""
        record = self.get(admission_key)
        described = (self.describe(kind, code) for code in sorted(record.codes(kind)))
        return [text for text in described if text]

    def subset(self, admission_keys: Iterable[str]) -> "Cohort":
        return Cohort(
            admissions={key: self.get(key) for key in sorted(admission_keys)},
            descriptions=self.descriptions,
        )


class NoteRecord(NamedTuple):
    admission_key: str
    subject_key: str
    text: str


class TableColumns(BaseModel):
    subject: str = "subject_id"
    admission: str = "hadm_id"
    code: str = "code"
    description: str | None = None


class TableSpec(BaseModel):
    file_name: str
    columns: TableColumns


def _default_tables() -> dict[CodeKind, TableSpec]:
    return {
        CodeKind.DIAGNOSIS: TableSpec(
            file_name="diagnoses_icd.csv", columns=TableColumns(description="long_title")
        ),
        CodeKind.MEDICATION: TableSpec(
            file_name="prescriptions.csv", columns=TableColumns(description="drug")
        ),
        CodeKind.PROCEDURE: TableSpec(
            file_name="procedures_icd.csv", columns=TableColumns(description="long_title")
        ),
    }


class CohortLayout(BaseModel):
    """File names, column names and delimiter of the cohort input files."""

    delimiter: str = Field(default=",", min_length=1, max_length=1)
    tables: dict[CodeKind, TableSpec] = Field(default_factory=_default_tables)
    notes_file: str = "discharge.jsonl"


def parse_code_table(
    stream: TextIO,
    kind: CodeKind,
    columns: TableColumns | None = None,
    delimiter: str = ",",
) -> list[CodeEntry]:
    """Parse a delimiter-separated code table into code entries, preserving row order.

    Args:
        stream: Text stream whose first row is the header.
        kind: Code kind of every row in the table.
        columns: Column names; defaults to ``subject_id``, ``hadm_id``, ``code``.
        delimiter: Field delimiter.

    Returns:
        One entry per data row with a non-empty code.

    Raises:
        MissingColumnError: If a required column is absent from the header.
        MalformedRowError: If a row does not have as many fields as the header.
    """
    columns = columns or TableColumns()
    reader = csv.reader(stream, delimiter=delimiter)
    header = next(reader, None)
    if header is None:
        return []
    header = [name.strip() for name in header]
    position = {name: i for i, name in enumerate(header)}
    for required in (columns.subject, columns.admission, columns.code):
        if required not in position:
            raise MissingColumnError(required, header)
    description_at = position.get(columns.description) if columns.description else None

    entries: list[CodeEntry] = []
    skipped = 0
    for row in reader:
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRowError(reader.line_num, len(header), len(row))
        code = normalize_code(row[position[columns.code]], kind)
        if not code:
            skipped += 1
            continue
        description = row[description_at].strip() if description_at is not None else ""
        entries.append(
            CodeEntry(
                subject_key=row[position[columns.subject]].strip(),
                admission_key=row[position[columns.admission]].strip(),
                kind=kind,
                code=code,
                description=description or None,
            )
        )
    if skipped:
        logger.warning("Skipped %d %s rows with an empty code field.", skipped, kind)
    return entries


class _NoteLine(BaseModel):
    model_config = ConfigDict(coerce_numbers_to_str=True)

    hadm_id: str
    subject_id: str
    text: str


def parse_notes(stream: TextIO) -> list[NoteRecord]:
    """Parse line-delimited JSON note records; blank lines are ignored.

    Raises:
        MalformedLineError: If a line is not a JSON object with hadm_id, subject_id and text.
    """
    records: list[NoteRecord] = []
    for line_number, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            parsed = _NoteLine.model_validate_json(line)
        except ValidationError as e:
            reason = "; ".join(
                f"{'.'.join(map(str, err['loc'])) or 'record'}: {err['msg']}" for err in e.errors()
            )
            raise MalformedLineError(line_number, reason) from e
        records.append(NoteRecord(parsed.hadm_id, parsed.subject_id, parsed.text))
    return records


def build_cohort(
    diag: Sequence[CodeEntry],
    med: Sequence[CodeEntry],
    proc: Sequence[CodeEntry],
    notes: Sequence[NoteRecord],
) -> Cohort:
    """Group code entries and notes by admission into a cohort.

    Raises:
        ConflictingSubjectError: If one admission key appears under two subject keys.
    """
    subjects: dict[str, str] = {}
    codes: dict[str, dict[CodeKind, set[str]]] = defaultdict(lambda: defaultdict(set))
    descriptions: dict[CodeKind, dict[str, str]] = defaultdict(dict)
    note_text: dict[str, str] = {}

    def claim(admission_key: str, subject_key: str) -> None:
        known = subjects.setdefault(admission_key, subject_key)
        if known != subject_key:
            raise ConflictingSubjectError(admission_key, {known, subject_key})

    for entry in (*diag, *med, *proc):
        claim(entry.admission_key, entry.subject_key)
        codes[entry.admission_key][entry.kind].add(entry.code)
        if entry.description:
            descriptions[entry.kind].setdefault(entry.code, entry.description)

    for note in notes:
        claim(note.admission_key, note.subject_key)
        note_text[note.admission_key] = note.text

    admissions = {
        key: AdmissionRecord(
            subject_key=subjects[key],
            admission_key=key,
            diag_codes=frozenset(codes[key][CodeKind.DIAGNOSIS]),
            med_codes=frozenset(codes[key][CodeKind.MEDICATION]),
            proc_codes=frozenset(codes[key][CodeKind.PROCEDURE]),
            note=note_text.get(key),
        )
        for key in sorted(subjects)
    }
    logger.info("Built cohort of %d admissions (%d with notes).", len(admissions), len(note_text))
    return Cohort(
        admissions=admissions,
        descriptions={kind: dict(sorted(table.items())) for kind, table in descriptions.items()},
    )


def filter_admissions(
    cohort: Cohort,
    min_entries: int = DEFAULT_MIN_ENTRIES,
    max_entries: int = DEFAULT_MAX_ENTRIES,
) -> Cohort:
    """Keep admissions with a note and every code-set size within the inclusive bounds."""
    retained = [
        key
        for key, record in cohort.admissions.items()
        if record.has_note
        and all(min_entries <= len(record.codes(kind)) <= max_entries for kind in CodeKind)
    ]
    logger.info(
        "Filter [%d, %d] retained %d of %d admissions.",
        min_entries,
        max_entries,
        len(retained),
        cohort.size,
    )
    return cohort.subset(retained)


def ingest_directory(directory: Path, layout: CohortLayout | None = None) -> Cohort:
    """Read the three code tables and the notes file of a directory into a cohort."""
    layout = layout or CohortLayout()
    tables: dict[CodeKind, list[CodeEntry]] = {}
    for kind in CodeKind:
        spec = layout.tables[kind]
        path = Path(directory) / spec.file_name
        logger.info("Reading %s codes from %s", kind, path)
        with path.open(encoding="utf-8", newline="") as stream:
            tables[kind] = parse_code_table(stream, kind, spec.columns, layout.delimiter)
    notes_path = Path(directory) / layout.notes_file
    logger.info("Reading notes from %s", notes_path)
    with notes_path.open(encoding="utf-8") as stream:
        notes = parse_notes(stream)
    return build_cohort(
        tables[CodeKind.DIAGNOSIS],
        tables[CodeKind.MEDICATION],
        tables[CodeKind.PROCEDURE],
        notes,
    )


def write_cohort_files(cohort: Cohort, directory: Path, layout: CohortLayout | None = None) -> None:
    """Serialize a cohort back into the ingestion file formats."""
    layout = layout or CohortLayout()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for kind in CodeKind:
        spec = layout.tables[kind]
        rows = [
            (record.subject_key, key, code, cohort.describe(kind, code) or "")
            for key in cohort.keys
            for record in (cohort.admissions[key],)
            for code in sorted(record.codes(kind))
        ]
        frame = pl.DataFrame(
            rows,
            schema=[
                spec.columns.subject,
                spec.columns.admission,
                spec.columns.code,
                spec.columns.description or "description",
            ],
            orient="row",
        )
        if spec.columns.description is None:
            frame = frame.drop("description")
        frame.write_csv(directory / spec.file_name, separator=layout.delimiter)

    notes = pl.DataFrame(
        [
            (key, record.subject_key, record.note)
            for key in cohort.keys
            for record in (cohort.admissions[key],)
            if record.note is not None
        ],
        schema=["hadm_id", "subject_id", "text"],
        orient="row",
    )
    notes.write_ndjson(directory / layout.notes_file)


class CohortArchive(BaseModel):
    format: Literal["exprag-cohort"] = ARCHIVE_FORMAT
    version: int = ARCHIVE_VERSION
    cohort: Cohort


def save_cohort(cohort: Cohort, path: Path) -> None:
    """Write the cohort as a gzip-compressed, versioned JSON archive with stable bytes."""
    payload = CohortArchive(cohort=cohort).model_dump_json().encode("utf-8")
    Path(path).write_bytes(gzip.compress(payload, mtime=0))
    logger.info("Saved cohort of %d admissions to %s", cohort.size, path)


def load_cohort(path: Path) -> Cohort:
    raw = json.loads(gzip.decompress(Path(path).read_bytes()))
    if raw.get("format") != ARCHIVE_FORMAT or raw.get("version") != ARCHIVE_VERSION:
        raise ValueError(
            f"{path} is not a version {ARCHIVE_VERSION} {ARCHIVE_FORMAT} archive "
            f"(found {raw.get('format')!r} v{raw.get('version')!r})."
        )
    return CohortArchive.model_validate(raw).cohort
