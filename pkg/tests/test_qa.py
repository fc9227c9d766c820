import random

import pytest
from pydantic import ValidationError

from exprag.cohort import CodeKind, Cohort
from exprag.exceptions import InsufficientDistractorsError, TooFewKeyPointsError
from exprag.qa import (
    AnswerMode,
    GenParams,
    OptionSource,
    QAItem,
    QAOption,
    RuleBasedPermuter,
    build_dataset,
    gen_instruction_item,
    gen_multiselect_item,
    read_dataset,
    summarize_key_points,
    write_dataset,
)
from exprag.segmenter import (
    TaskKind,
    assemble_background,
    extract_gold,
    instruction_key_points,
    normalize_text,
    segment_note,
)
from tests.helpers import FULL_NOTE, admission

DESCRIPTIONS = {
    CodeKind.DIAGNOSIS: {
        "D1": "Hypertension",
        "D2": "Type 2 diabetes",
        "D3": "Anemia",
        "D4": "Gout",
    }
}


def note_cohort(diag: set[str], note: str = FULL_NOTE) -> Cohort:
    record = admission("H1", "S1", diag, {"M1", "M2", "M3"}, {"P1", "P2", "P3"}, note)
    return Cohort(admissions={"H1": record}, descriptions=DESCRIPTIONS)


def test_multiselect_item_with_ehr_distractors():
    cohort = note_cohort({"D1", "D2", "D3", "D4"})
    params = GenParams(n_options_multi=3)
    adm = cohort.get("H1")
    item = gen_multiselect_item(
        adm, segment_note(adm.note), TaskKind.DIAGNOSIS, cohort, params, random.Random(0)
    )
    assert item.question_id == "diagnosis-H1"
    assert item.mode is AnswerMode.MULTI_SELECT
    assert item.n_options == 3
    texts = {option.text: option.source for option in item.options}
    assert texts["Hypertension"] is OptionSource.GOLD
    assert texts["Type 2 diabetes"] is OptionSource.GOLD
    (distractor,) = [text for text, source in texts.items() if source is not OptionSource.GOLD]
    assert distractor in {"Anemia", "Gout"}
    gold_texts = {o.text for o in item.options if o.letter in item.gold_set}
    assert gold_texts == {"Hypertension", "Type 2 diabetes"}


def test_multiselect_item_caps_gold_options():
    cohort = note_cohort({"D1", "D2", "D3", "D4"})
    params = GenParams(n_options_multi=2)
    adm = cohort.get("H1")
    item = gen_multiselect_item(
        adm, segment_note(adm.note), TaskKind.DIAGNOSIS, cohort, params, random.Random(0)
    )
    assert len(item.gold_letters) == 1
    assert sum(o.source is OptionSource.EHR_DISTRACTOR for o in item.options) == 1


MEDICATION_NOTE = FULL_NOTE.replace(
    "Discharge Instructions:",
    "Discharge Medications:\n1. Lisinopril 10 mg PO daily\n\nDischarge Instructions:",
)


def medication_cohort() -> Cohort:
    record = admission("H1", "S1", {"D1"}, {"M1", "M2", "M3"}, {"P1"}, MEDICATION_NOTE)
    descriptions = {
        **DESCRIPTIONS,
        CodeKind.MEDICATION: {"M1": "Lisinopril 10 mg", "M2": "Aspirin 81 mg", "M3": "Heparin"},
    }
    return Cohort(admissions={"H1": record}, descriptions=descriptions)


def test_dosed_gold_drug_is_never_a_distractor():
    cohort = medication_cohort()
    adm = cohort.get("H1")
    seg = segment_note(adm.note)
    for seed in range(5):
        item = gen_multiselect_item(
            adm, seg, TaskKind.MEDICATION, cohort, GenParams(n_options_multi=3), random.Random(seed)
        )
        texts = {option.text: option.source for option in item.options}
        assert texts == {
            "Lisinopril": OptionSource.GOLD,
            "Aspirin": OptionSource.EHR_DISTRACTOR,
            "Heparin": OptionSource.EHR_DISTRACTOR,
        }
    with pytest.raises(InsufficientDistractorsError):
        gen_multiselect_item(
            adm, seg, TaskKind.MEDICATION, cohort, GenParams(n_options_multi=4), random.Random(0)
        )


def test_multiselect_item_needs_distractors():
    cohort = note_cohort({"D1", "D2"})
    adm = cohort.get("H1")
    with pytest.raises(InsufficientDistractorsError):
        gen_multiselect_item(
            adm,
            segment_note(adm.note),
            TaskKind.DIAGNOSIS,
            cohort,
            GenParams(n_options_multi=3),
            random.Random(0),
        )


def test_instruction_item():
    cohort = note_cohort({"D1"})
    adm = cohort.get("H1")
    seg = segment_note(adm.note)
    item = gen_instruction_item(adm, seg, GenParams(), random.Random(0))
    assert item.mode is AnswerMode.SINGLE_SELECT
    assert item.n_options == 4
    (gold_letter,) = item.gold_letters
    gold = next(option for option in item.options if option.letter == gold_letter)
    assert gold.text == summarize_key_points(instruction_key_points(seg))
    assert {o.source for o in item.options if o.letter != gold_letter} == {
        OptionSource.PERMUTED_DISTRACTOR
    }
    assert "Discharge Instructions" not in item.background


def test_instruction_item_needs_key_points():
    note = FULL_NOTE.split("Discharge Instructions:")[0] + (
        "Discharge Instructions:\n- Rest at home.\n- Drink fluids.\n"
    )
    cohort = note_cohort({"D1"}, note)
    adm = cohort.get("H1")
    with pytest.raises(TooFewKeyPointsError):
        gen_instruction_item(adm, segment_note(note), GenParams(), random.Random(0))


def test_permuter_changes_every_summary():
    points = instruction_key_points(segment_note(FULL_NOTE))
    permuted = RuleBasedPermuter().permute(points, 5, random.Random(1), ["Metoprolol"])
    original = normalize_text(summarize_key_points(points))
    assert len(permuted) == 5
    assert len({normalize_text(text) for text in permuted}) == 5
    assert original not in {normalize_text(text) for text in permuted}


def test_item_rejects_duplicate_options():
    with pytest.raises(ValidationError):
        QAItem(
            question_id="q",
            admission_key="H1",
            task=TaskKind.DIAGNOSIS,
            mode=AnswerMode.MULTI_SELECT,
            question="?",
            background="b",
            options=[
                QAOption(letter="A", text="Gout", source=OptionSource.GOLD),
                QAOption(letter="B", text="gout.", source=OptionSource.EHR_DISTRACTOR),
            ],
            gold_letters=["A"],
        )


def test_item_queries_and_rendering():
    item = QAItem(
        question_id="q",
        admission_key="H1",
        task=TaskKind.DIAGNOSIS,
        mode=AnswerMode.MULTI_SELECT,
        question="Which apply?",
        background="Chief Complaint:\nCough.",
        options=[
            QAOption(letter="A", text="Gout", source=OptionSource.GOLD),
            QAOption(letter="B", text="Anemia", source=OptionSource.EHR_DISTRACTOR),
        ],
        gold_letters=["A"],
    )
    assert item.render_options() == "A) Gout\nB) Anemia"
    assert item.retrieval_query() == "Which apply?\nA) Gout\nB) Anemia"
    assert item.ranking_query().endswith("Cough.")


def test_build_dataset_is_deterministic(tmp_path, narrative_cohort):
    params = GenParams(seed=4, counts={task: 15 for task in TaskKind})
    first, manifest = build_dataset(narrative_cohort.cohort, params)
    second, _ = build_dataset(narrative_cohort.cohort, params)
    assert first == second
    assert manifest.complete
    assert manifest.total == 45

    write_dataset(first, tmp_path / "a.jsonl")
    write_dataset(second, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert read_dataset(tmp_path / "a.jsonl") == first


def test_build_dataset_with_zero_counts(narrative_cohort):
    items, manifest = build_dataset(
        narrative_cohort.cohort, GenParams(counts={task: 0 for task in TaskKind})
    )
    assert items == []
    assert manifest.complete
    assert manifest.total == 0


def test_build_dataset_reports_skips(tiny_cohort):
    params = GenParams(counts={TaskKind.DIAGNOSIS: 2})
    items, manifest = build_dataset(tiny_cohort, params)
    assert items == []
    report = manifest.tasks[TaskKind.DIAGNOSIS]
    assert report.skipped == {"missing_gold_section": 5}
    assert report.shortfall == 2
    assert not manifest.complete


def test_generated_items_are_sound(narrative_cohort):
    cohort = narrative_cohort.cohort
    items, _ = build_dataset(cohort, GenParams(seed=2, counts={task: 20 for task in TaskKind}))
    assert items
    for item in items:
        seg = segment_note(cohort.get(item.admission_key).note)
        assert item.background == assemble_background(seg, item.task)
        gold = {o.text for o in item.options if o.letter in item.gold_set}
        if item.task is TaskKind.INSTRUCTION:
            assert gold == {summarize_key_points(instruction_key_points(seg))}
            continue
        kind = CodeKind.DIAGNOSIS if item.task is TaskKind.DIAGNOSIS else CodeKind.MEDICATION
        listed = {entry.text for entry in extract_gold(seg, item.task)}
        assert {normalize_text(text) for text in gold} <= listed
        descriptions = set(cohort.code_descriptions(item.admission_key, kind))
        for option in item.options:
            if option.source is OptionSource.EHR_DISTRACTOR:
                assert option.text in descriptions
                assert normalize_text(option.text) not in listed


def test_backgrounds_never_hold_discharge_answers(narrative_cohort):
    cohort = narrative_cohort.cohort
    items, _ = build_dataset(cohort, GenParams(seed=3, counts={task: 20 for task in TaskKind}))
    assert items
    for item in items:
        seg = segment_note(cohort.get(item.admission_key).note)
        background = normalize_text(item.background)
        if item.task is TaskKind.INSTRUCTION:
            answers = [normalize_text(point) for point in instruction_key_points(seg)]
        else:
            answers = [entry.text for entry in extract_gold(seg, item.task)]
        answers += [normalize_text(o.text) for o in item.options if o.letter in item.gold_set]
        for answer in answers:
            assert answer
            assert answer not in background, (item.question_id, answer)
