import gzip
import io
import logging

import pytest

from exprag.cohort import (
    CodeEntry,
    CodeKind,
    Cohort,
    CohortLayout,
    NoteRecord,
    TableColumns,
    build_cohort,
    filter_admissions,
    ingest_directory,
    load_cohort,
    normalize_code,
    parse_code_table,
    parse_notes,
    save_cohort,
    write_cohort_files,
)
from exprag.exceptions import (
    ConflictingSubjectError,
    MalformedLineError,
    MalformedRowError,
    MissingColumnError,
    UnknownAdmissionError,
)
from exprag.synth import SynthParams, synthesize_cohort
from tests.helpers import admission


def entry(key: str, code: str, kind: CodeKind = CodeKind.DIAGNOSIS, subject: str = "S1"):
    return CodeEntry(subject_key=subject, admission_key=key, kind=kind, code=code)


def test_normalize_code_strips_dots_from_icd_only():
    assert normalize_code(" e11.9 ", CodeKind.DIAGNOSIS) == "E119"
    assert normalize_code("0DT.J4ZZ", CodeKind.PROCEDURE) == "0DTJ4ZZ"
    assert normalize_code("ndc.123", CodeKind.MEDICATION) == "NDC.123"


def test_parse_code_table_normalizes_codes():
    table = "subject_id,hadm_id,code\nS1,H1,E11.9\nS1,H1,I10\n"
    entries = parse_code_table(io.StringIO(table), CodeKind.DIAGNOSIS)
    assert [e.code for e in entries] == ["E119", "I10"]
    assert all(e.admission_key == "H1" and e.subject_key == "S1" for e in entries)


def test_parse_code_table_header_only():
    assert parse_code_table(io.StringIO("subject_id,hadm_id,code\n"), CodeKind.DIAGNOSIS) == []


def test_parse_code_table_short_row_reports_line():
    table = "subject_id,hadm_id,code\nS1,H1\n"
    with pytest.raises(MalformedRowError) as excinfo:
        parse_code_table(io.StringIO(table), CodeKind.DIAGNOSIS)
    assert excinfo.value.line_number == 2


def test_parse_code_table_missing_column():
    with pytest.raises(MissingColumnError) as excinfo:
        parse_code_table(io.StringIO("subject_id,icd\nS1,I10\n"), CodeKind.DIAGNOSIS)
    assert excinfo.value.column == "hadm_id"


def test_parse_code_table_custom_columns_and_delimiter():
    table = "patient;visit;ndc;drug\nS9;H9;0001;Aspirin\n"
    columns = TableColumns(subject="patient", admission="visit", code="ndc", description="drug")
    (parsed,) = parse_code_table(io.StringIO(table), CodeKind.MEDICATION, columns, ";")
    assert (parsed.subject_key, parsed.admission_key, parsed.code) == ("S9", "H9", "0001")
    assert parsed.description == "Aspirin"


def test_parse_code_table_counts_empty_codes(caplog):
    table = "subject_id,hadm_id,code\nS1,H1,\nS1,H1,I10\nS1,H1,  \n"
    with caplog.at_level(logging.WARNING):
        entries = parse_code_table(io.StringIO(table), CodeKind.DIAGNOSIS)
    assert [e.code for e in entries] == ["I10"]
    assert "Skipped 2 diagnosis rows" in caplog.text


def test_parse_notes():
    stream = io.StringIO('{"hadm_id": "H1", "subject_id": "S1", "text": "Line one.\\n  two "}\n')
    assert parse_notes(stream) == [NoteRecord("H1", "S1", "Line one.\n  two ")]
    assert parse_notes(io.StringIO("")) == []


def test_parse_notes_accepts_numeric_ids_and_blank_lines():
    stream = io.StringIO('\n{"hadm_id": 20001, "subject_id": 10, "text": "x"}\n\n')
    assert parse_notes(stream) == [NoteRecord("20001", "10", "x")]


def test_parse_notes_missing_text():
    stream = io.StringIO('{"hadm_id": "H1", "subject_id": "S1", "text": "a"}\n{"hadm_id": "H2"}\n')
    with pytest.raises(MalformedLineError) as excinfo:
        parse_notes(stream)
    assert excinfo.value.line_number == 2
    assert "text" in str(excinfo.value)


def test_build_cohort_uses_set_semantics():
    diag = [entry("H1", "D1"), entry("H1", "D2"), entry("H1", "D1")]
    cohort = build_cohort(diag, [], [], [])
    assert cohort.get("H1").diag_codes == frozenset({"D1", "D2"})


def test_build_cohort_admission_from_note_only():
    cohort = build_cohort([entry("H1", "D1")], [], [], [NoteRecord("H2", "S2", "note")])
    assert cohort.size == 2
    assert not cohort.get("H1").has_note
    h2 = cohort.get("H2")
    assert h2.note == "note"
    assert all(not h2.codes(kind) for kind in CodeKind)


def test_build_cohort_conflicting_subject():
    with pytest.raises(ConflictingSubjectError):
        build_cohort([entry("H1", "D1", subject="S1")], [entry("H1", "M1", subject="S2")], [], [])


def test_cohort_lookup_and_subjects(tiny_cohort):
    assert tiny_cohort.keys == ["H1", "H2", "H3", "H4", "H5"]
    assert tiny_cohort.subject_admissions["S1"] == ["H1", "H4"]
    assert "H3" in tiny_cohort
    with pytest.raises(UnknownAdmissionError):
        tiny_cohort.get("H99")
    assert tiny_cohort.code_descriptions("H3", CodeKind.DIAGNOSIS) == ["Hypertension", "Gout"]


def _sized(key: str, d: int, m: int, p: int, note: str | None = "note"):
    return admission(
        key,
        f"S-{key}",
        {f"D{i}" for i in range(d)},
        {f"M{i}" for i in range(m)},
        {f"P{i}" for i in range(p)},
        note,
    )


def test_filter_admissions_bounds():
    records = [
        _sized("A", 2, 5, 5),
        _sized("B", 3, 3, 3),
        _sized("C", 10, 10, 10, note=None),
        _sized("D", 40, 40, 40),
        _sized("E", 41, 5, 5),
    ]
    cohort = Cohort(admissions={r.admission_key: r for r in records})
    kept = filter_admissions(cohort)
    assert kept.keys == ["B", "D"]
    assert kept.get("B") is cohort.get("B")


def test_filter_matches_planted_violations():
    synthetic = synthesize_cohort(SynthParams(seed=11, n_subjects=80, violation_rate=0.3))
    kept = filter_admissions(synthetic.cohort)
    expected = [
        key
        for key, record in synthetic.cohort.admissions.items()
        if record.has_note and all(3 <= len(record.codes(kind)) <= 40 for kind in CodeKind)
    ]
    assert kept.keys == sorted(expected)
    assert set(kept.keys) == set(synthetic.cohort.keys) - synthetic.violations
    assert synthetic.violations


def test_cohort_archive_round_trip(tmp_path, narrative_cohort):
    path = tmp_path / "cohort.json.gz"
    save_cohort(narrative_cohort.cohort, path)
    first = path.read_bytes()
    assert load_cohort(path) == narrative_cohort.cohort
    save_cohort(load_cohort(path), path)
    assert path.read_bytes() == first


def test_load_cohort_rejects_foreign_archive(tmp_path):
    path = tmp_path / "other.json.gz"
    path.write_bytes(gzip.compress(b'{"format": "something-else", "version": 1}'))
    with pytest.raises(ValueError, match="not a version 1"):
        load_cohort(path)


def test_cohort_files_round_trip(tmp_path, narrative_cohort):
    layout = CohortLayout()
    write_cohort_files(narrative_cohort.cohort, tmp_path, layout)
    assert ingest_directory(tmp_path, layout) == narrative_cohort.cohort
