from pathlib import Path

import pytest
from pydantic import ValidationError

from exprag.exceptions import EmptyBackgroundError, MissingGoldSectionError
from exprag.segmenter import (
    HeaderTable,
    Phase,
    SectionKind,
    TaskKind,
    assemble_background,
    extract_gold,
    instruction_key_points,
    normalize_text,
    segment_note,
    split_medication,
)
from tests.helpers import FULL_NOTE

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_section_phases():
    assert len(SectionKind) == 7
    assert [kind.phase for kind in SectionKind].count(Phase.CLINICAL_PROFILE) == 3
    assert SectionKind.IN_HOSPITAL_PROGRESS.phase is Phase.IN_HOSPITAL
    assert SectionKind.POST_DISCHARGE_INSTRUCTIONS.phase is Phase.DISCHARGE_PLAN


def test_segment_full_note():
    seg = segment_note(FULL_NOTE, admission_key="H1")
    assert seg.residual == ""
    assert list(seg.sections) == list(SectionKind)
    assert all(text.strip() for text in seg.sections.values())
    assert seg.reconstruct() == FULL_NOTE


def test_segment_keeps_preamble_as_residual():
    note = "Name: ___ Unit No: ___\nDISCHARGE INSTRUCTIONS:\nRest at home.\n"
    seg = segment_note(note)
    assert seg.residual == "Name: ___ Unit No: ___\n"
    assert [span.kind for span in seg.spans] == [SectionKind.POST_DISCHARGE_INSTRUCTIONS]
    assert seg.spans[0].body == "\nRest at home.\n"
    assert seg.reconstruct() == note


def test_segment_without_headers():
    seg = segment_note("free text only")
    assert seg.spans == []
    assert seg.reconstruct() == "free text only"


def test_header_needs_line_start_and_colon():
    note = "Chief Complaint:\nSee the discharge diagnosis below.\nDischarge Diagnosis\nnone\n"
    seg = segment_note(note)
    assert [span.kind for span in seg.spans] == [SectionKind.PRESENTING_CONDITION]


def test_background_per_task():
    seg = segment_note(FULL_NOTE)
    profile = FULL_NOTE.split("Major Surgical")[0].strip()
    hospital = FULL_NOTE.split("Discharge Diagnosis")[0].strip()
    assert assemble_background(seg, TaskKind.DIAGNOSIS) == profile
    assert assemble_background(seg, TaskKind.MEDICATION) == hospital
    assert assemble_background(seg, TaskKind.INSTRUCTION) == hospital


def test_background_uses_canonical_order():
    note = "Brief Hospital Course:\nImproved.\n\nChief Complaint:\nCough.\n"
    background = assemble_background(segment_note(note), TaskKind.MEDICATION)
    assert background == "Chief Complaint:\nCough.\n\nBrief Hospital Course:\nImproved."


def test_background_needs_a_visible_section():
    note = "Discharge Diagnosis:\n1. Gout\n\nDischarge Instructions:\n- Rest.\n"
    for task in TaskKind:
        with pytest.raises(EmptyBackgroundError):
            assemble_background(segment_note(note), task)


def test_extract_diagnosis_items():
    gold = extract_gold(segment_note(FULL_NOTE), TaskKind.DIAGNOSIS)
    assert [item.text for item in gold] == ["hypertension", "type 2 diabetes"]
    assert [item.display for item in gold] == ["Hypertension", "Type 2 diabetes"]


def test_extract_medication_keeps_dose():
    note = "Discharge Medications:\n1. Lisinopril 10 mg PO daily\n2. Aspirin 81 mg PO daily\n"
    gold = extract_gold(segment_note(note), TaskKind.MEDICATION)
    assert [item.text for item in gold] == ["lisinopril", "aspirin"]
    assert gold[0].detail == "10 mg PO daily"
    assert split_medication("Insulin glargine") == ("Insulin glargine", None)


def test_extract_empty_medication_section():
    note = "Discharge Medications:\n\nDischarge Instructions:\n- Rest.\n"
    with pytest.raises(MissingGoldSectionError):
        extract_gold(segment_note(note), TaskKind.MEDICATION)


def test_extract_instruction_is_the_section_text():
    seg = segment_note(FULL_NOTE)
    (gold,) = extract_gold(seg, TaskKind.INSTRUCTION)
    body = FULL_NOTE.split("Discharge Instructions:")[1].strip()
    assert gold.text == body


def test_instruction_key_points():
    points = instruction_key_points(segment_note(FULL_NOTE))
    assert points == [
        "Take Lisinopril 10 mg every morning.",
        "Walk for 20 minutes twice a day.",
        "Avoid lifting more than 10 pounds for 4 weeks.",
        "Follow up with your cardiologist in 2 weeks.",
    ]


def test_normalize_text():
    assert normalize_text("1. Hypertension,") == "hypertension"
    assert normalize_text("Type 2  Diabetes") == "type 2 diabetes"
    once = normalize_text("- Take Aspirin (81 mg) daily!")
    assert normalize_text(once) == once


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        ("1.5 mg warfarin nightly", "1 5 mg warfarin nightly"),
        ("2) Heparin", "heparin"),
        ("-5 degrees outside", "5 degrees outside"),
        ("3.", ""),
    ],
)
def test_normalize_text_keeps_leading_numbers(text, expected):
    assert normalize_text(text) == expected


def test_header_table_rejects_unknown_gold_header():
    with pytest.raises(ValidationError):
        HeaderTable(gold_headers={TaskKind.DIAGNOSIS: ["Final Diagnosis"]})


def test_custom_synonym():
    headers = HeaderTable(
        sections={**HeaderTable().sections, SectionKind.PRESENTING_CONDITION: ["Reason for Visit"]}
    )
    seg = segment_note("Reason for visit:\nFall.\n", headers)
    assert seg.spans[0].kind is SectionKind.PRESENTING_CONDITION


def test_headers_file_matches_defaults():
    assert HeaderTable.from_yaml(CONFIGS / "headers.yaml") == HeaderTable()


def test_sentinel_notes_never_leak_discharge_plan(sentinel_cohort):
    notes = [r for r in sentinel_cohort.cohort.admissions.values() if r.note]
    assert len(notes) >= 200
    for record in notes:
        seg = segment_note(record.note, admission_key=record.admission_key)
        assert seg.residual == ""
        assert set(seg.sections) == set(SectionKind)
        assert seg.reconstruct() == record.note
        for task in TaskKind:
            background = assemble_background(seg, task)
            assert "discharge_summary" not in background
            assert "post_discharge_instructions" not in background
            assert f"{record.admission_key} patient_demography 1." in background
